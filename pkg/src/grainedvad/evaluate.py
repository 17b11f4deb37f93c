"""Inference and frame-level metrics (pooled ROC-AUC and step-wise AP)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .data import Manifest, snippet_to_frame_scores
from .model import GrainedVAD
from .trainer import TrainConfig, prepare_video

CSV_HEADER = ("video_id", "frame_index", "score", "label")


class ScoreFileError(ValueError):
    pass


@dataclass
class ScoreRecord:
    video_id: str
    frame_scores: np.ndarray
    frame_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.frame_scores = np.asarray(self.frame_scores, dtype=np.float64)
        if self.frame_labels is not None:
            self.frame_labels = np.asarray(self.frame_labels, dtype=np.int8)
            if self.frame_labels.shape != self.frame_scores.shape:
                raise ValueError(f"{self.video_id}: score/label length mismatch")


@dataclass
class MetricsReport:
    auc: float
    ap: float
    n_frames: int
    n_positive: int

    def to_dict(self) -> dict:
        return {"auc": self.auc, "ap": self.ap, "n_frames": self.n_frames,
                "n_positive": self.n_positive}


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return scores, labels.astype(bool)


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic (ties count 1/2)."""
    scores, pos = _check_binary(scores, labels)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative frames")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Sum over descending thresholds of ``(R_n - R_{n-1}) * P_n``.

    Frames sharing a score form one threshold.
    """
    scores, pos = _check_binary(scores, labels)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise ValueError("AP needs at least one positive frame")
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], pos[order]
    tp = np.cumsum(p)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = tp[ends].astype(np.float64)
    seen = (ends + 1).astype(np.float64)
    precision = tp / seen
    recall = tp / n_pos
    delta = np.diff(np.r_[0.0, recall])
    return float(np.sum(delta * precision))


def pool(records: Iterable[ScoreRecord]) -> tuple[np.ndarray, np.ndarray]:
    records = list(records)
    if any(r.frame_labels is None for r in records):
        missing = next(r.video_id for r in records if r.frame_labels is None)
        raise ValueError(f"{missing} has no frame labels")
    if not records:
        return np.zeros(0), np.zeros(0, dtype=np.int8)
    return (np.concatenate([r.frame_scores for r in records]),
            np.concatenate([r.frame_labels for r in records]))


def compute_metrics(records: Iterable[ScoreRecord]) -> MetricsReport:
    """Micro-averaged metrics: all frames of all videos pooled."""
    scores, labels = pool(records)
    return MetricsReport(roc_auc(scores, labels), average_precision(scores, labels),
                         int(labels.size), int(labels.sum()))


# --------------------------------------------------------------------------- #
# Inference
# --------------------------------------------------------------------------- #

@torch.no_grad()
def infer_video(model: GrainedVAD, features, text=None) -> np.ndarray:
    """Anomaly score for every snippet; ``features`` is ``[n_crops, T, D]``."""
    model.eval()
    dtype = next(model.parameters()).dtype
    feats = torch.as_tensor(np.asarray(features), dtype=dtype)
    txt = None if text is None else torch.as_tensor(np.asarray(text), dtype=dtype)
    return model.snippet_scores(feats, txt).numpy().astype(np.float64)


def score_manifest(model: GrainedVAD, manifest: Manifest, config: TrainConfig,
                   require_labels: bool = True) -> list[ScoreRecord]:
    records = []
    for rec in manifest.records:
        if require_labels and rec.frame_labels is None:
            raise ValueError(f"{rec.video_id}: test records need frame_labels")
        video = prepare_video(rec.load_features(), rec.load_text(), config, rec.label, rec.video_id)
        snippet = infer_video(model, video.features, video.text)
        frames = snippet_to_frame_scores(snippet, rec.num_frames)
        records.append(ScoreRecord(rec.video_id, frames, rec.frame_labels))
    return records


def evaluate_dataset(model: GrainedVAD, manifest: Manifest, config: TrainConfig,
                     scores_csv=None) -> MetricsReport:
    records = score_manifest(model, manifest, config)
    if scores_csv is not None:
        write_scores_csv(records, scores_csv)
    return compute_metrics(records)


# --------------------------------------------------------------------------- #
# Score CSV
# --------------------------------------------------------------------------- #

def write_scores_csv(records: Sequence[ScoreRecord], path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for rec in records:
        labels = rec.frame_labels
        for i, score in enumerate(rec.frame_scores):
            label = "" if labels is None else int(labels[i])
            writer.writerow((rec.video_id, i, repr(float(score)), label))
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def read_scores_csv(path) -> list[ScoreRecord]:
    """Parse a score CSV back into per-video records (frame order as written)."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ScoreFileError(f"{path}: expected header {','.join(CSV_HEADER)}")
        grouped: dict[str, tuple[list, list]] = {}
        for lineno, row in enumerate(reader, 2):
            if len(row) != 4:
                raise ScoreFileError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            vid, idx, score, label = row
            try:
                idx_i = int(idx)
                score_f = float(score)
                label_i = int(label)
            except ValueError:
                raise ScoreFileError(f"{path}:{lineno}: malformed row {row!r}") from None
            if label_i not in (0, 1) or not 0.0 <= score_f <= 1.0:
                raise ScoreFileError(f"{path}:{lineno}: invalid score or label")
            scores, labels = grouped.setdefault(vid, ([], []))
            if idx_i != len(scores):
                raise ScoreFileError(f"{path}:{lineno}: frame_index {idx_i} out of sequence")
            scores.append(score_f)
            labels.append(label_i)
    return [ScoreRecord(vid, np.array(s), np.array(l)) for vid, (s, l) in grouped.items()]
