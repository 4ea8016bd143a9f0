"""SGD training with the poly learning-rate schedule and class-balanced loss."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data.dataset import IGNORE_INDEX, Sample
from .engine import functional as F
from .engine.rng import RngState
from .engine.tensor import EngineError, NonFiniteError, Tape, Tensor
from .model.builder import with_dropout
from .model.graph import GraphSpec, ParamStore, check_params, forward

log = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).parent / "presets"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Augmentation:
    hflip: bool = True
    max_translate_px: int = 8


@dataclass(frozen=True)
class TrainConfig:
    lr_base: float = 0.05
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 4
    total_iterations: int = 13800
    dropout_rate: float = 0.0
    class_balancing: bool = True
    k: float = 1.1
    log_base: str = "e"
    augmentation: Augmentation = field(default_factory=Augmentation)
    seed: int = 0
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if isinstance(self.augmentation, Mapping):
            object.__setattr__(self, "augmentation", Augmentation(**self.augmentation))
        if not self.lr_base > 0:
            raise ValueError("lr_base must be positive")
        if not self.power > 0:
            raise ValueError("power must be positive")
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.log_base not in ("e", "10", "2"):
            raise ValueError("log_base must be 'e', '10' or '2'")
        if self.augmentation.max_translate_px < 0:
            raise ValueError("max_translate_px must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown train config key {unknown[0]!r}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: {exc}") from None
        return cls.from_json(data)

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        """``camvid`` or ``cityscapes`` hyperparameter profile."""
        data = json.loads((PRESET_DIR / f"{name}.json").read_text())
        data.update(overrides)
        return cls.from_json(data)


def poly_lr(iteration: int, total_iterations: int, lr_base: float = 0.05, power: float = 0.9) -> float:
    """``lr_base * (1 - iteration / total_iterations) ** power``."""
    if not 0 <= iteration <= total_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {total_iterations}]")
    return lr_base * (1.0 - iteration / total_iterations) ** power


_LOGS = {"e": math.log, "10": math.log10, "2": math.log2}


def class_weights(probs: Sequence[float], k: float = 1.1, log_base: str = "e") -> np.ndarray:
    """``w_c = 1 / log(p_c + k)``, then divided by the maximum weight."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probs must be a non-empty vector")
    if (p < 0).any() or p.sum() > 1 + 1e-6:
        raise ValueError("probs must be non-negative and sum to at most 1")
    if not (p > 0).any():
        raise ValueError("at least one class must be present")
    if (p + k <= 1).any():
        raise ValueError(f"p_c + k must exceed 1 (k={k})")
    logf = _LOGS[log_base]
    raw = np.array([1.0 / logf(v + k) for v in p])
    return raw / raw.max()


def class_probabilities(labels: Sequence[np.ndarray], num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Pixel frequency of each class over all non-ignored pixels."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for lab in labels:
        valid = lab[lab != ignore_index]
        counts += np.bincount(valid.ravel(), minlength=num_classes)[:num_classes]
    total = counts.sum()
    if total == 0:
        raise ValueError("no labelled pixels")
    return counts / total


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    iteration: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "OptimizerState":
        return cls({k: np.zeros_like(t.data) for k, t in params.items()})


def is_bn_affine(name: str) -> bool:
    return name.endswith(".gamma") or name.endswith(".beta")


def sgd_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    decay_exempt: Callable[[str], bool] = is_bn_affine,
) -> None:
    """In place: ``g' = g + wd * p``, ``v = momentum * v + g'``, ``p -= lr * v``.

    BN gamma/beta are exempt from weight decay.
    """
    if set(params) != set(grads) or set(params) != set(state.velocity):
        raise ValueError("params, grads and optimizer state must share keys")
    for name, p in params.items():
        g = np.asarray(grads[name])
        v = state.velocity[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"{name}: shape mismatch {p.shape} / {g.shape} / {v.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"{name}: non-finite gradient")
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        if weight_decay and not decay_exempt(name):
            g = g + weight_decay * p.data
        v = state.velocity[name]
        v *= momentum
        v += g
        p.assign(p.data - lr * v)
    state.iteration += 1


def hflip(image: np.ndarray, label: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return image[..., ::-1].copy(), label[..., ::-1].copy()


def translate(image: np.ndarray, label: np.ndarray, dy: int, dx: int, ignore_index: int = IGNORE_INDEX) -> tuple[np.ndarray, np.ndarray]:
    """Shift content by (dy, dx); the image is edge-replicated, the label filled with ignore."""
    h, w = label.shape
    if abs(dy) >= h or abs(dx) >= w:
        raise ValueError(f"translation ({dy}, {dx}) exceeds image size {h}x{w}")
    src_y = np.clip(np.arange(h) - dy, 0, h - 1)
    src_x = np.clip(np.arange(w) - dx, 0, w - 1)
    img = image[..., src_y[:, None], src_x[None, :]]
    lab = np.full_like(label, ignore_index)
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    lab[ys, xs] = label[max(-dy, 0) : h - max(dy, 0), max(-dx, 0) : w - max(dx, 0)]
    return img, lab


def augment_sample(image: np.ndarray, label: np.ndarray, aug: Augmentation, rng: RngState, ignore_index: int = IGNORE_INDEX):
    """Random horizontal flip (p = 0.5) then integer translation in [-t, t] per axis.

    RNG draws per call, in order: flip coin (if enabled), dy, dx (if t > 0).
    """
    if aug.hflip and rng.uniform(1)[0] < 0.5:
        image, label = hflip(image, label)
    t = aug.max_translate_px
    if t > 0:
        dy = rng.integers(-t, t)
        dx = rng.integers(-t, t)
        image, label = translate(image, label, dy, dx, ignore_index)
    return image, label


@dataclass
class TrainResult:
    graph: GraphSpec
    params: ParamStore
    log: list[tuple[int, float, float]]
    class_weights: np.ndarray


def write_log_csv(rows: Sequence[tuple[int, float, float]], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "lr", "loss"])
        for it, lr, loss in rows:
            writer.writerow([it, f"{lr:.9g}", f"{loss:.9g}"])


def _child_seeds(seed: int, n: int) -> list[int]:
    return [int(v) for v in RngState(seed).next_u64(n)]


def batch_schedule(n_samples: int, batch_size: int, rng: RngState):
    """Endless stream of index batches: seeded shuffle per epoch, last partial batch kept."""
    while True:
        perm = rng.permutation(n_samples)
        for start in range(0, n_samples, batch_size):
            yield perm[start : start + batch_size]


def train_loop(
    graph: GraphSpec,
    params: ParamStore,
    dataset: Sequence[Sample],
    cfg: TrainConfig,
    on_iteration: Callable[[int, ParamStore], None] | None = None,
) -> TrainResult:
    """Train ``params`` in place; deterministic for a given ``cfg.seed``."""
    if len(dataset) == 0:
        raise TrainingError("dataset is empty")
    check_params(graph, params)
    num_classes = graph.num_classes
    labels = [s.label for s in dataset]
    for s in dataset:
        bad = (s.label != cfg.ignore_index) & ((s.label < 0) | (s.label >= num_classes))
        if bad.any():
            raise TrainingError(f"sample {s.id!r} has labels outside [0, {num_classes})")
    if cfg.class_balancing:
        probs = class_probabilities(labels, num_classes, cfg.ignore_index)
        weights = class_weights(probs, cfg.k, cfg.log_base)
    else:
        weights = np.ones(num_classes)
    graph = with_dropout(graph, cfg.dropout_rate)

    shuffle_seed, aug_seed, drop_seed = _child_seeds(cfg.seed, 3)
    batches = batch_schedule(len(dataset), cfg.batch_size, RngState(shuffle_seed))
    aug_rng = RngState(aug_seed)
    drop_rng = RngState(drop_seed)
    learnable = params.learnable()
    state = OptimizerState.zeros_like(learnable)
    dtype = next(iter(learnable.values())).dtype
    rows: list[tuple[int, float, float]] = []

    for it in range(cfg.total_iterations):
        idx = next(batches)
        images, labs = [], []
        for i in idx:
            img, lab = augment_sample(dataset[i].image[0], dataset[i].label, cfg.augmentation, aug_rng, cfg.ignore_index)
            images.append(img)
            labs.append(lab)
        x = Tensor(np.stack(images).astype(dtype, copy=False))
        y = np.stack(labs)
        lr = poly_lr(it, cfg.total_iterations, cfg.lr_base, cfg.power)
        for t in learnable.values():
            t.requires_grad = True
        try:
            with Tape() as tape:
                logits = forward(graph, params, x, mode=F.TRAIN, rng=drop_rng)
                loss = F.weighted_cross_entropy(logits, y, weights, cfg.ignore_index)
            grad_map = tape.backward(loss, wrt=list(learnable.values()))
            grads = {name: grad_map[t] for name, t in learnable.items()}
            sgd_step(learnable, grads, state, lr, cfg.momentum, cfg.weight_decay)
        except EngineError as exc:
            raise TrainingError(f"training diverged at iteration {it}: {exc}") from exc
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise TrainingError(f"training diverged at iteration {it}: loss {loss_value}")
        rows.append((it, lr, loss_value))
        if it % 50 == 0:
            log.info("iter %d lr %.6g loss %.6g", it, lr, loss_value)
        if on_iteration is not None:
            on_iteration(it, params)
    for t in learnable.values():
        t.requires_grad = False
    return TrainResult(graph, params, rows, weights)
