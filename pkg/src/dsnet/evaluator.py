"""Prediction, confusion-matrix metrics, the full-resolution protocol, latency benchmarking."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data.dataset import IGNORE_INDEX, Sample, resize_image
from .engine import functional as F
from .engine.tensor import ShapeError, Tensor
from .model.graph import GraphSpec, ParamStore, forward


class EvaluationError(ValueError):
    pass


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest class index."""
    return np.asarray(logits).argmax(axis=1)


def predict_logits(graph: GraphSpec, params: ParamStore, image: np.ndarray) -> np.ndarray:
    x = image if image.ndim == 4 else image[None]
    out = forward(graph, params, Tensor(x.astype(_param_dtype(params), copy=False)), mode=F.EVAL)
    return out.data


def predict(graph: GraphSpec, params: ParamStore, image: np.ndarray) -> np.ndarray:
    """Eval-mode forward and argmax. ``image`` is (1, 3, H, W); returns (H, W) int64."""
    h, w = image.shape[-2:]
    logits = predict_logits(graph, params, image)
    if logits.shape[2:] != (h, w):
        raise EvaluationError(f"input {h}x{w} is incompatible with the network stride (logits {logits.shape[2]}x{logits.shape[3]})")
    return argmax_labels(logits)[0]


def _param_dtype(params: ParamStore):
    for t in params.learnable().values():
        return t.dtype
    return np.float32


@dataclass
class ConfusionMatrix:
    """``counts[i, j]`` = pixels with ground truth i predicted as j."""

    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise EvaluationError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts.copy())


def update_confusion(cm: ConfusionMatrix, predicted: np.ndarray, truth: np.ndarray, ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    """Accumulate non-ignored pixels into ``cm`` (in place) and return it."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise EvaluationError(f"prediction {predicted.shape} and truth {truth.shape} differ in shape")
    keep = truth != ignore_index
    t = truth[keep].astype(np.int64)
    p = predicted[keep].astype(np.int64)
    c = cm.num_classes
    if t.size and (t.min() < 0 or t.max() >= c):
        raise EvaluationError(f"ground-truth class out of range [0, {c})")
    if p.size and (p.min() < 0 or p.max() >= c):
        raise EvaluationError(f"predicted class out of range [0, {c})")
    cm.counts += np.bincount(t * c + p, minlength=c * c).reshape(c, c)
    return cm


def miou_and_global_acc(cm: ConfusionMatrix) -> dict:
    """IoU_c = TP / (TP + FP + FN); classes with zero union are left out of the mean."""
    counts = cm.counts.astype(np.int64)
    total = counts.sum()
    if total == 0:
        raise EvaluationError("empty confusion matrix")
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    present = union > 0
    iou = np.full(cm.num_classes, np.nan)
    iou[present] = tp[present] / union[present]
    return {
        "per_class_iou": iou,
        "miou": float(iou[present].mean()),
        "global_acc": float(tp.sum() / total),
        "present": present,
    }


def metrics_to_json(cm: ConfusionMatrix, class_names: Sequence[str] = ()) -> dict:
    m = miou_and_global_acc(cm)
    return {
        "per_class_iou": [None if np.isnan(v) else float(v) for v in m["per_class_iou"]],
        "miou": m["miou"],
        "global_acc": m["global_acc"],
        "pixels": cm.total,
        "correct_pixels": int(np.trace(cm.counts)),
        "class_pixels": [int(v) for v in cm.counts.sum(axis=1)],
        "class_names": list(class_names),
    }


def score_sample(
    graph: GraphSpec,
    params: ParamStore,
    sample: Sample,
    eval_size: tuple[int, int],
    full_size: tuple[int, int],
    ignore_index: int = IGNORE_INDEX,
    upsample: str = "logits",
) -> ConfusionMatrix:
    """Resize to ``eval_size``, predict, bring the result to ``full_size``, score."""
    if sample.label.shape != tuple(full_size):
        raise EvaluationError(f"sample {sample.id!r} is {sample.label.shape}, expected full size {tuple(full_size)}")
    image = sample.image
    if image.shape[2:] != tuple(eval_size):
        image = resize_image(image, *eval_size)
    logits = predict_logits(graph, params, image)
    if logits.shape[2:] != tuple(eval_size):
        raise EvaluationError(f"eval size {tuple(eval_size)} incompatible with the network stride")
    if upsample == "logits":
        if logits.shape[2:] != tuple(full_size):
            logits = F.bilinear_resize(Tensor(logits), *full_size).data
        pred = argmax_labels(logits)[0]
    elif upsample == "labels":
        from .data.dataset import resize_label

        pred = resize_label(argmax_labels(logits)[0], *full_size)
    else:
        raise ValueError(f"upsample must be 'logits' or 'labels', got {upsample!r}")
    return update_confusion(ConfusionMatrix(graph.num_classes), pred, sample.label, ignore_index)


def evaluate_dataset(
    graph: GraphSpec,
    params: ParamStore,
    dataset: Iterable[Sample],
    eval_size: tuple[int, int],
    full_size: tuple[int, int],
    ignore_index: int = IGNORE_INDEX,
    upsample: str = "logits",
) -> tuple[dict, ConfusionMatrix]:
    """Score every sample; returns (metrics, confusion matrix)."""
    cm = ConfusionMatrix(graph.num_classes)
    for sample in dataset:
        cm = cm + score_sample(graph, params, sample, eval_size, full_size, ignore_index, upsample)
    return miou_and_global_acc(cm), cm


def pixel_accuracy(graph: GraphSpec, params: ParamStore, samples: Sequence[Sample], ignore_index: int = IGNORE_INDEX) -> float:
    cm = ConfusionMatrix(graph.num_classes)
    for s in samples:
        update_confusion(cm, predict(graph, params, s.image), s.label, ignore_index)
    return miou_and_global_acc(cm)["global_acc"]


def benchmark(
    graph: GraphSpec,
    params: ParamStore,
    input_shape: Sequence[int],
    warmup_iters: int = 5,
    timed_iters: int = 50,
    seed: int = 0,
) -> dict:
    """Wall-clock latency of eval-mode forward passes on a random input.

    Each timed pass is instrumented per node; ``mean_ms`` is the mean of the
    whole-pass times and ``per_node`` the mean time of each node.
    """
    if timed_iters < 1:
        raise ValueError("timed_iters must be >= 1")
    shape = tuple(int(v) for v in input_shape)
    if len(shape) == 3:
        shape = (1, *shape)
    if len(shape) != 4:
        raise ShapeError(f"input shape must be (C, H, W) or (N, C, H, W), got {input_shape}")
    x = Tensor(np.random.default_rng(seed).random(shape).astype(_param_dtype(params)))
    for _ in range(warmup_iters):
        forward(graph, params, x)

    node_ids = [n.id for n in graph.nodes]
    node_ops = {n.id: n.op for n in graph.nodes}
    node_time = dict.fromkeys(node_ids, 0.0)
    totals = []
    clock = time.perf_counter
    for _ in range(timed_iters):
        mark = [clock()]

        def hook(node, out):
            now = clock()
            node_time[node.id] += now - mark[0]
            mark[0] = now

        start = mark[0]
        forward(graph, params, x, hook=hook)
        totals.append(clock() - start)
    mean_ms = 1000.0 * float(np.mean(totals))
    per_node = [{"id": nid, "op": node_ops[nid], "ms": 1000.0 * node_time[nid] / timed_iters} for nid in node_ids]
    return {
        "input_shape": list(shape),
        "warmup_iters": warmup_iters,
        "timed_iters": timed_iters,
        "mean_ms": mean_ms,
        "fps": 1000.0 / mean_ms,
        "per_node": per_node,
        "per_node_total_ms": sum(p["ms"] for p in per_node),
    }
