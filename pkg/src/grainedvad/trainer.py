"""Parameter initialisation, paired normal/abnormal training, checkpoints and
finite-difference gradient verification."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .data import Manifest, decode_feature, encode_feature
from .losses import batch_margin_loss, snippet_ce_loss, total_loss
from .model import GrainedVAD, reset_parameters

log = logging.getLogger(__name__)

MODALITIES = ("both", "visual", "text")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 5e-3
    batch_size: int = 64
    epochs: int = 100
    alpha: float = 1e-4
    margin: float = 100.0
    k: int = 3
    seed: int = 0
    optimizer: str = "adam"
    feature_dim: int = 2048
    focus_dim: Optional[int] = None
    text_dim: int = 768
    hidden1: int = 512
    hidden2: int = 32
    radius: int = 2
    dilations: tuple = (1, 2, 4)
    scc_width: int = 3
    epsilon: float = 1e-8
    # "visual" drops the text stream, "text" blanks the visual input
    modality: str = "both"

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even and >= 2")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        if self.modality == "visual":
            self.text_dim = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def init_params(config: TrainConfig, dtype=torch.float32) -> GrainedVAD:
    model = GrainedVAD(
        feature_dim=config.feature_dim,
        text_dim=config.text_dim,
        focus_dim=config.focus_dim,
        hidden1=config.hidden1,
        hidden2=config.hidden2,
        radius=config.radius,
        dilations=config.dilations,
        scc_width=config.scc_width,
        k=config.k,
        epsilon=config.epsilon,
    )
    reset_parameters(model, config.seed)
    return model.to(dtype)


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Adam:
    # torch's Adam adds weight_decay * p to the gradient (coupled L2)
    return torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )


# --------------------------------------------------------------------------- #
# Data
# --------------------------------------------------------------------------- #

@dataclass
class Video:
    features: torch.Tensor   # [n_crops, T, D]
    text: torch.Tensor       # [T, D_t]
    label: int
    video_id: str = ""


def prepare_video(features, text, config: TrainConfig, label: int = 0, video_id: str = "",
                  dtype=torch.float32) -> Video:
    feats = torch.as_tensor(np.asarray(features), dtype=dtype)
    if feats.ndim == 2:
        feats = feats.unsqueeze(0)
    txt = torch.as_tensor(np.asarray(text), dtype=dtype)
    if feats.shape[-1] != config.feature_dim:
        raise ValueError(
            f"{video_id}: feature dim {feats.shape[-1]} != configured {config.feature_dim}"
        )
    if txt.shape[0] != feats.shape[1]:
        raise ValueError(f"{video_id}: {txt.shape[0]} text rows for {feats.shape[1]} snippets")
    if config.modality == "visual":
        txt = txt[:, :0]
    elif config.modality == "text":
        feats = torch.zeros_like(feats)
    if txt.shape[1] != config.text_dim:
        raise ValueError(f"{video_id}: text dim {txt.shape[1]} != configured {config.text_dim}")
    return Video(feats, txt, int(label), video_id)


def load_videos(manifest: Manifest, config: TrainConfig, dtype=torch.float32) -> list[Video]:
    return [
        prepare_video(r.load_features(), r.load_text(), config, r.label, r.video_id, dtype)
        for r in manifest.records
    ]


# --------------------------------------------------------------------------- #
# Loss over a batch
# --------------------------------------------------------------------------- #

@dataclass
class LossRecord:
    loss: float
    margin: float
    ce: float


@dataclass
class BatchLoss:
    loss: torch.Tensor
    margin: torch.Tensor
    ce: torch.Tensor
    m_k: torch.Tensor
    topk: list

    def record(self) -> LossRecord:
        return LossRecord(self.loss.item(), self.margin.item(), self.ce.item())


def batch_loss(model: GrainedVAD, videos: Sequence[Video], config: TrainConfig) -> BatchLoss:
    """``alpha * L_v + L_s`` over a batch. Videos sharing a shape are stacked;
    ragged batches fall back to one forward pass per shape group."""
    groups: dict[tuple, list[int]] = {}
    for i, v in enumerate(videos):
        groups.setdefault((tuple(v.features.shape), tuple(v.text.shape)), []).append(i)
    m_k: list = [None] * len(videos)
    topk: list = [None] * len(videos)
    ce_terms = []
    for idx in groups.values():
        feats = torch.stack([videos[i].features for i in idx])
        text = torch.stack([videos[i].text for i in idx])
        labels = torch.tensor([videos[i].label for i in idx], dtype=torch.float64)
        out = model(feats, text)
        ce_terms.append(snippet_ce_loss(out.snippet_scores, labels, config.epsilon))
        for j, i in enumerate(idx):
            m_k[i] = out.m_k[j]
            topk[i] = out.topk[j]
    m = torch.stack(m_k).double()
    y = torch.tensor([v.label for v in videos])
    margin = batch_margin_loss(m, y, config.margin)
    ce = ce_terms[0]
    for term in ce_terms[1:]:
        ce = ce + term
    return BatchLoss(total_loss(margin, ce, config.alpha), margin, ce, m, topk)


def train_step(model: GrainedVAD, optimizer: torch.optim.Optimizer, batch_normal: Sequence[Video],
               batch_abnormal: Sequence[Video], config: TrainConfig) -> LossRecord:
    """One Adam update on a balanced batch; parameters are updated in place."""
    if len(batch_normal) != len(batch_abnormal):
        raise ValueError("normal and abnormal sub-batches must have equal size")
    optimizer.zero_grad(set_to_none=True)
    result = batch_loss(model, list(batch_normal) + list(batch_abnormal), config)
    if not torch.isfinite(result.loss):
        max_w = max(p.detach().abs().max().item() for p in model.parameters())
        raise FloatingPointError(
            f"non-finite loss {result.loss.item()} (L_v={result.margin.item()}, "
            f"L_s={result.ce.item()}, max|w|={max_w:.3g})"
        )
    result.loss.backward()
    grads = [p.grad for p in model.parameters() if p.grad is not None]
    if not all(torch.isfinite(g).all() for g in grads):
        max_g = max(g.abs().max().item() for g in grads)
        raise FloatingPointError(f"non-finite gradient (max|grad|={max_g})")
    optimizer.step()
    return result.record()


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #

CONTAINER_MAGIC = b"GMFC"
CONTAINER_VERSION = 1


@dataclass
class Checkpoint:
    model: GrainedVAD
    optimizer: torch.optim.Adam
    config: TrainConfig
    epoch: int = 0
    rng_state: Optional[dict] = None
    history: list = field(default_factory=list)


def _as_gmfv_shape(t: torch.Tensor) -> torch.Tensor:
    if t.ndim in (2, 3):
        return t
    if t.ndim < 2:
        return t.reshape(1, -1)
    raise ValueError(f"cannot store rank-{t.ndim} tensor")


def write_container(tensors: dict, path) -> None:
    """Named tensors as a sequence of GMFV records:
    ``GMFC | u32 version | u32 count | (u32 name_len, name, u64 nbytes, GMFV)*``.
    Rank 0/1 tensors are stored as ``[1, n]``; callers keep true shapes elsewhere."""
    chunks = [CONTAINER_MAGIC, struct.pack("<II", CONTAINER_VERSION, len(tensors))]
    for name, t in tensors.items():
        blob = encode_feature(_as_gmfv_shape(t.detach().cpu()).numpy())
        raw = name.encode("utf-8")
        chunks += [struct.pack("<I", len(raw)), raw, struct.pack("<Q", len(blob)), blob]
    Path(path).write_bytes(b"".join(chunks))


def read_container(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != CONTAINER_MAGIC:
        raise ValueError(f"{path}: not a tensor container")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CONTAINER_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode("utf-8")
        off += n
        (nbytes,) = struct.unpack_from("<Q", buf, off)
        off += 8
        out[name] = decode_feature(buf[off : off + nbytes])
        off += nbytes
    if off != len(buf):
        raise ValueError(f"{path}: trailing bytes in container")
    return out


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    if any(p.dtype != torch.float32 for p in ckpt.model.parameters()):
        raise ValueError("checkpoints store float32 parameters only")
    names = [n for n, _ in ckpt.model.named_parameters()]
    tensors = {f"param.{n}": p for n, p in ckpt.model.named_parameters()}
    state = ckpt.optimizer.state_dict()
    steps = {}
    for i, name in enumerate(names):
        s = state["state"].get(i)
        if s is None:
            continue
        steps[name] = float(s["step"])
        tensors[f"adam.{name}.exp_avg"] = s["exp_avg"]
        tensors[f"adam.{name}.exp_avg_sq"] = s["exp_avg_sq"]
    write_container(tensors, path)
    meta = {
        "format": "gmfv-checkpoint/1",
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "shapes": {n: list(p.shape) for n, p in ckpt.model.named_parameters()},
        "adam_steps": steps,
        "history": ckpt.history,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    tensors = read_container(path)
    config = TrainConfig.from_dict(meta["config"])
    model = init_params(config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            stored = tensors.get(f"param.{name}")
            if stored is None:
                raise ValueError(f"{path}: missing parameter {name}")
            shape = tuple(meta["shapes"][name])
            if shape != tuple(p.shape):
                raise ValueError(f"{path}: {name} has shape {shape}, model expects {tuple(p.shape)}")
            p.copy_(torch.from_numpy(stored.reshape(shape)))
    optimizer = make_optimizer(model, config)
    state = optimizer.state_dict()
    for i, (name, p) in enumerate(model.named_parameters()):
        if name not in meta["adam_steps"]:
            continue
        state["state"][i] = {
            "step": torch.tensor(meta["adam_steps"][name], dtype=torch.float32),
            "exp_avg": torch.from_numpy(tensors[f"adam.{name}.exp_avg"].reshape(p.shape).copy()),
            "exp_avg_sq": torch.from_numpy(tensors[f"adam.{name}.exp_avg_sq"].reshape(p.shape).copy()),
        }
    optimizer.load_state_dict(state)
    return Checkpoint(model, optimizer, config, meta["epoch"], meta["rng_state"], meta["history"])


# --------------------------------------------------------------------------- #
# Training loop
# --------------------------------------------------------------------------- #

def _draw(rng: np.random.Generator, order: np.ndarray, start: int, size: int, n: int) -> np.ndarray:
    picked = order[start : start + size]
    if len(picked) < size:
        picked = np.concatenate([picked, rng.integers(0, n, size - len(picked))])
    return picked


def train(config: TrainConfig, manifest: Manifest, resume: Optional[Checkpoint] = None,
          videos: Optional[list[Video]] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> Checkpoint:
    """Train until ``config.epochs`` epochs have run.

    An epoch is one pass over the shuffled abnormal videos in half-batches of
    ``batch_size // 2``; each is paired with as many normal videos drawn from a
    shuffled pass over the normal set. A class that runs out inside an epoch is
    topped up by sampling with replacement.
    """
    if videos is None:
        videos = load_videos(manifest, config)
    normal = [v for v in videos if v.label == 0]
    abnormal = [v for v in videos if v.label == 1]
    if not normal or not abnormal:
        raise ValueError(
            f"training needs both classes (normal={len(normal)}, abnormal={len(abnormal)})"
        )

    if resume is None:
        model = init_params(config)
        ckpt = Checkpoint(model, make_optimizer(model, config), config)
        rng = np.random.default_rng([config.seed, 1])
    else:
        ckpt = resume
        ckpt.config = config
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
    model, optimizer = ckpt.model, ckpt.optimizer
    model.train()

    half = config.batch_size // 2
    n_steps = math.ceil(len(abnormal) / half)
    while ckpt.epoch < config.epochs:
        abn_order = rng.permutation(len(abnormal))
        nor_order = rng.permutation(len(normal))
        records = []
        for step in range(n_steps):
            a = _draw(rng, abn_order, step * half, half, len(abnormal))
            n = _draw(rng, nor_order, step * half, half, len(normal))
            records.append(
                train_step(model, optimizer, [normal[i] for i in n], [abnormal[i] for i in a], config)
            )
        ckpt.epoch += 1
        row = {
            "epoch": ckpt.epoch,
            "loss": float(np.mean([r.loss for r in records])),
            "margin_loss": float(np.mean([r.margin for r in records])),
            "ce_loss": float(np.mean([r.ce for r in records])),
        }
        ckpt.history.append(row)
        log.debug("epoch %(epoch)d L=%(loss).5f L_v=%(margin_loss).3f L_s=%(ce_loss).5f", row)
        if on_epoch is not None:
            on_epoch(row)
    ckpt.rng_state = rng.bit_generator.state
    return ckpt


# --------------------------------------------------------------------------- #
# Gradient verification
# --------------------------------------------------------------------------- #

class SelectionUnstableError(RuntimeError):
    """Top-k set or hinge activity changed under the finite-difference step."""


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_coords: int
    worst: tuple = ()


def _signature(res: BatchLoss, config: TrainConfig):
    m = res.m_k.detach()
    gaps = config.margin - (m[:, None] - m[None, :])
    return [tuple(t.tolist()) for t in res.topk], (gaps > 0).tolist()


def gradient_check(model: GrainedVAD, videos: Sequence[Video], config: TrainConfig,
                   eps: float = 1e-5, n_coords: int = 200, seed: int = 0,
                   floor: float = 1e-6) -> GradCheckResult:
    """Compare autograd gradients of the total loss with central differences.

    Coordinates are sampled per parameter tensor (at least two from each, more
    in proportion to size) until ``n_coords`` are drawn. Relative error is
    ``|g - g_fd| / max(|g|, |g_fd|, floor)``. Raises ``SelectionUnstableError``
    when a perturbation flips the top-k set or a hinge; pick another input then.
    """
    if any(p.dtype != torch.float64 for p in model.parameters()):
        raise ValueError("gradient_check needs a float64 model")
    if any(v.features.dtype != torch.float64 for v in videos):
        raise ValueError("gradient_check needs float64 inputs")
    params = dict(model.named_parameters())
    model.zero_grad(set_to_none=True)
    base = batch_loss(model, videos, config)
    base.loss.backward()
    base_sig = _signature(base, config)

    rng = np.random.default_rng(seed)
    total = sum(p.numel() for p in params.values())
    picks = []
    for name, p in params.items():
        share = max(2, round(n_coords * p.numel() / total))
        share = min(share, p.numel())
        for flat in rng.choice(p.numel(), share, replace=False):
            picks.append((name, int(flat)))

    worst = (0.0, None)
    with torch.no_grad():
        for name, flat in picks:
            p = params[name]
            view = p.view(-1)
            orig = view[flat].item()
            view[flat] = orig + eps
            plus = batch_loss(model, videos, config)
            view[flat] = orig - eps
            minus = batch_loss(model, videos, config)
            view[flat] = orig
            if _signature(plus, config) != base_sig or _signature(minus, config) != base_sig:
                raise SelectionUnstableError(f"selection changed perturbing {name}[{flat}]")
            numeric = (plus.loss.item() - minus.loss.item()) / (2 * eps)
            analytic = p.grad.view(-1)[flat].item()
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            if err > worst[0] or worst[1] is None:
                worst = (err, (name, flat, analytic, numeric))
    return GradCheckResult(worst[0], len(picks), worst[1])
