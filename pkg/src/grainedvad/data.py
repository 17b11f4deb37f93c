"""Videos-as-features: the GMFV tensor file format, JSON-lines manifests,
text tiling, snippet-to-frame expansion and a synthetic dataset generator.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Optional

import numpy as np

MAGIC = b"GMFV"
VERSION = 1
FRAMES_PER_SNIPPET = 16

_HEADER = struct.Struct("<4sIB3x")
_U32_MAX = 2**32 - 1


class FeatureFileError(ValueError):
    """Base class for GMFV decoding failures."""


class BadMagicError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class PayloadSizeError(FeatureFileError):
    """Payload length disagrees with the declared shape (truncated or trailing bytes)."""


class ManifestError(ValueError):
    pass


# --------------------------------------------------------------------------- #
# GMFV tensor files
# --------------------------------------------------------------------------- #

def encode_feature(values) -> bytes:
    arr = np.asarray(values)
    if arr.ndim not in (2, 3):
        raise ValueError(f"GMFV stores rank 2 or 3 arrays, got rank {arr.ndim}")
    if any(d > _U32_MAX for d in arr.shape):
        raise ValueError(f"dimension does not fit in u32: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to write non-finite feature values")
    header = _HEADER.pack(MAGIC, VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return header + dims + payload


def decode_feature(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        if buf[:4] != MAGIC[: len(buf[:4])]:
            raise BadMagicError(f"bad magic {buf[:4]!r}")
        raise PayloadSizeError(f"header truncated: {len(buf)} bytes")
    magic, version, rank = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported GMFV version {version}")
    if rank not in (2, 3):
        raise FeatureFileError(f"unsupported rank {rank}")
    offset = _HEADER.size
    if len(buf) < offset + 4 * rank:
        raise PayloadSizeError("dimension block truncated")
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    got = len(buf) - offset
    if got != expected:
        raise PayloadSizeError(
            f"declared shape {shape} needs {expected} payload bytes, found {got}"
        )
    arr = np.frombuffer(buf, dtype="<f4", offset=offset).reshape(shape)
    return arr.astype(np.float32)


def write_feature_file(values, path) -> None:
    """Write a rank-2 or rank-3 array as a GMFV file (float32, little endian)."""
    data = encode_feature(values)
    Path(path).write_bytes(data)


def read_feature_file(path) -> np.ndarray:
    return decode_feature(Path(path).read_bytes())


# --------------------------------------------------------------------------- #
# Manifests
# --------------------------------------------------------------------------- #

@dataclass
class VideoRecord:
    video_id: str
    label: int
    feature_path: Path
    text_path: Path
    num_frames: int
    frame_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ManifestError(f"{self.video_id}: label must be 0 or 1, got {self.label!r}")
        if not isinstance(self.num_frames, int) or self.num_frames < 1:
            raise ManifestError(f"{self.video_id}: num_frames must be a positive integer")
        if self.frame_labels is not None:
            fl = np.asarray(self.frame_labels)
            if fl.shape != (self.num_frames,):
                raise ManifestError(
                    f"{self.video_id}: {fl.size} frame labels for {self.num_frames} frames"
                )
            if not np.isin(fl, (0, 1)).all():
                raise ManifestError(f"{self.video_id}: frame labels must be 0/1")
            self.frame_labels = fl.astype(np.int8)

    def load_features(self) -> np.ndarray:
        feats = read_feature_file(self.feature_path)
        if feats.ndim == 2:
            feats = feats[None]
        check_num_frames(feats.shape[1], self.num_frames)
        return feats

    def load_text(self) -> np.ndarray:
        text = read_feature_file(self.text_path)
        if text.ndim != 2:
            raise FeatureFileError(f"{self.text_path}: text features must be rank 2")
        return text


@dataclass
class Manifest:
    records: list[VideoRecord] = field(default_factory=list)
    split: Literal["train", "test"] = "train"

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.video_id in seen:
                raise ManifestError(f"duplicate video_id {rec.video_id!r}")
            seen.add(rec.video_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_label(self, label: int) -> list[VideoRecord]:
        return [r for r in self.records if r.label == label]


_REQUIRED = ("video_id", "label", "feature_path", "text_path", "num_frames")


def load_manifest(path, split: Optional[str] = None) -> Manifest:
    """Parse a JSON-lines manifest. Relative paths resolve against the manifest's
    directory; feature files are not opened here."""
    path = Path(path)
    base = path.parent
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in _REQUIRED if k not in obj]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            fl = obj.get("frame_labels")
            records.append(
                VideoRecord(
                    video_id=str(obj["video_id"]),
                    label=obj["label"],
                    feature_path=base / obj["feature_path"],
                    text_path=base / obj["text_path"],
                    num_frames=obj["num_frames"],
                    frame_labels=None if fl is None else np.asarray(fl),
                )
            )
    if split is None:
        split = "test" if records and all(r.frame_labels is not None for r in records) else "train"
    return Manifest(records, split)


def dump_manifest(records: Iterable[VideoRecord], path, relative_to=None) -> None:
    """Write records as JSON lines; paths are stored relative to ``relative_to``
    (default: the manifest's directory) when possible."""
    path = Path(path)
    root = Path(relative_to) if relative_to is not None else path.parent
    lines = []
    for rec in records:
        obj = {
            "video_id": rec.video_id,
            "label": int(rec.label),
            "feature_path": _relpath(rec.feature_path, root),
            "text_path": _relpath(rec.text_path, root),
            "num_frames": int(rec.num_frames),
        }
        if rec.frame_labels is not None:
            obj["frame_labels"] = [int(v) for v in rec.frame_labels]
        lines.append(json.dumps(obj, separators=(",", ":")))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _relpath(p, root: Path) -> str:
    p = Path(p)
    try:
        return p.relative_to(root).as_posix()
    except ValueError:
        return p.as_posix()


# --------------------------------------------------------------------------- #
# Shape helpers
# --------------------------------------------------------------------------- #

def tile_text_features(text, n_crops: int):
    """Repeat per-snippet text embeddings ``[T, D_t]`` along a new leading crop axis.

    Works on numpy arrays and torch tensors (the latter via ``expand``, no copy).
    """
    if n_crops < 1:
        raise ValueError("n_crops must be >= 1")
    if hasattr(text, "expand"):
        return text.unsqueeze(0).expand(n_crops, *text.shape)
    text = np.asarray(text)
    return np.repeat(text[None], n_crops, axis=0)


def check_num_frames(n_snippets: int, num_frames: int) -> None:
    lo = FRAMES_PER_SNIPPET * (n_snippets - 1)
    hi = FRAMES_PER_SNIPPET * n_snippets
    if not lo < num_frames <= hi:
        raise ValueError(
            f"{num_frames} frames is inconsistent with {n_snippets} snippets "
            f"(expected {lo + 1}..{hi})"
        )


def snippet_to_frame_scores(scores, num_frames: int) -> np.ndarray:
    """Frame ``f`` takes the score of snippet ``f // 16``; the final snippet may be partial."""
    scores = np.asarray(scores)
    check_num_frames(len(scores), num_frames)
    return np.repeat(scores, FRAMES_PER_SNIPPET)[:num_frames]


# --------------------------------------------------------------------------- #
# Synthetic datasets
# --------------------------------------------------------------------------- #

@dataclass
class SyntheticSpec:
    n_normal: int = 50
    n_abnormal: int = 50
    T: int = 32
    D: int = 16
    D_t: int = 8
    n_crops: int = 2
    anomaly_window: tuple[int, int] = (8, 16)
    anomaly_channel: Literal["visual", "text", "both"] = "both"
    shift_magnitude: float = 2.0
    seed: int = 0
    n_test_normal: int = 20
    n_test_abnormal: int = 20
    partial_last_snippet: bool = True

    def __post_init__(self):
        start, end = self.anomaly_window
        if not 0 <= start < end <= self.T:
            raise ValueError(f"anomaly window {self.anomaly_window} outside [0, {self.T}]")
        if self.anomaly_channel not in ("visual", "text", "both"):
            raise ValueError(f"unknown anomaly channel {self.anomaly_channel!r}")
        if self.shift_magnitude < 0:
            raise ValueError("shift_magnitude must be non-negative")
        counts = (self.n_normal, self.n_abnormal, self.n_test_normal, self.n_test_abnormal)
        if min(counts) < 0:
            raise ValueError("video counts must be non-negative")
        if self.T < 1 or self.D < 1 or self.D_t < 0 or self.n_crops < 1:
            raise ValueError("T, D, n_crops must be positive and D_t non-negative")


def _synth_video(rng: np.random.Generator, spec: SyntheticSpec, abnormal: bool):
    visual = rng.standard_normal((spec.n_crops, spec.T, spec.D), dtype=np.float64)
    text = rng.standard_normal((spec.T, spec.D_t), dtype=np.float64)
    if spec.partial_last_snippet:
        last = int(rng.integers(1, FRAMES_PER_SNIPPET + 1))
    else:
        last = FRAMES_PER_SNIPPET
    num_frames = FRAMES_PER_SNIPPET * (spec.T - 1) + last
    frame_labels = np.zeros(num_frames, dtype=np.int8)
    if abnormal:
        start, end = spec.anomaly_window
        if spec.anomaly_channel in ("visual", "both"):
            visual[:, start:end] += spec.shift_magnitude
        if spec.anomaly_channel in ("text", "both"):
            text[start:end] += spec.shift_magnitude
        frame_labels[start * FRAMES_PER_SNIPPET : min(end * FRAMES_PER_SNIPPET, num_frames)] = 1
    return visual.astype(np.float32), text.astype(np.float32), num_frames, frame_labels


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir) -> tuple[Manifest, Manifest]:
    """Write a synthetic train/test dataset under ``out_dir``.

    Normal videos are i.i.d. standard normal per entry. Abnormal videos are drawn
    the same way, then every entry of the snippets inside ``anomaly_window`` is
    shifted by ``shift_magnitude`` on the selected channel(s). Output is a pure
    function of ``spec`` (including the seed).
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "text").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    plan = [
        ("train", "normal", spec.n_normal, False),
        ("train", "abnormal", spec.n_abnormal, True),
        ("test", "normal", spec.n_test_normal, False),
        ("test", "abnormal", spec.n_test_abnormal, True),
    ]
    manifests: dict[str, list[VideoRecord]] = {"train": [], "test": []}
    for split, kind, count, abnormal in plan:
        for i in range(count):
            vid = f"{split}_{kind}_{i:04d}"
            visual, text, num_frames, frame_labels = _synth_video(rng, spec, abnormal)
            fpath = out / "features" / f"{vid}.gmfv"
            tpath = out / "text" / f"{vid}.gmfv"
            write_feature_file(visual, fpath)
            write_feature_file(text, tpath)
            manifests[split].append(
                VideoRecord(
                    video_id=vid,
                    label=int(abnormal),
                    feature_path=fpath,
                    text_path=tpath,
                    num_frames=num_frames,
                    frame_labels=frame_labels if split == "test" else None,
                )
            )
    dump_manifest(manifests["train"], out / "train.jsonl")
    dump_manifest(manifests["test"], out / "test.jsonl")
    return Manifest(manifests["train"], "train"), Manifest(manifests["test"], "test")


def snippet_labels(record: VideoRecord, n_snippets: int) -> np.ndarray:
    """Per-snippet ground truth (1 if any frame of the snippet is abnormal)."""
    if record.frame_labels is None:
        raise ValueError(f"{record.video_id} has no frame labels")
    fl = np.zeros(FRAMES_PER_SNIPPET * n_snippets, dtype=np.int8)
    fl[: record.num_frames] = record.frame_labels
    return fl.reshape(n_snippets, FRAMES_PER_SNIPPET).max(axis=1)


def describe(manifest: Manifest) -> dict:
    n_abn = sum(r.label for r in manifest.records)
    return {
        "split": manifest.split,
        "videos": len(manifest),
        "abnormal": n_abn,
        "normal": len(manifest) - n_abn,
    }

