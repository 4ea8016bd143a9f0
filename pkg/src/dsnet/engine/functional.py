"""Forward primitives and their reverse-mode gradients.

Conventions:

* ``conv2d`` is a cross-correlation (the kernel is not flipped) with
  symmetric zero padding.
* ``transposed_conv2d`` is exactly the input-gradient map of ``conv2d``;
  its weight is laid out ``(C_in, C_out, kh, kw)``.
* ``bilinear_resize`` maps output index ``d`` to source coordinate
  ``(d + 0.5) * in / out - 0.5`` (half-pixel centers, no corner alignment),
  clamped to ``[0, in - 1]``, and interpolates linearly per axis.
* ``relu`` has subgradient 0 at exactly 0.
* ``dropout`` is inverted: survivors are scaled by ``1 / (1 - p)`` in train
  mode and eval mode is the identity.

Every primitive preserves the floating dtype of its input and raises
:class:`NonFiniteError` if it produces NaN or Inf.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RngState
from .tensor import NonFiniteError, ShapeError, Tensor, as_tensor, needs_grad

TRAIN = "train"
EVAL = "eval"


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def _require_4d(t: Tensor, op: str) -> None:
    if t.ndim != 4:
        raise ShapeError(f"{op} expects a 4-D (N, C, H, W) tensor, got shape {t.shape}")


def _make(data: np.ndarray, op: str) -> Tensor:
    return Tensor(_check_finite(data, op))


# --------------------------------------------------------------------------
# convolution kernels shared by conv2d and transposed_conv2d


def _patch(xp: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    """Valid cross-correlation of an already padded input. Returns (N, Co, ho, wo)."""
    n, c = xp.shape[:2]
    co, _, kh, kw = w.shape
    if kh == 1 and kw == 1 and stride == 1:
        return np.matmul(np.ascontiguousarray(w[:, :, 0, 0]), xp.reshape(n, c, ho * wo)).reshape(n, co, ho, wo)
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))  # BLAS needs contiguous taps
    out = np.zeros((n, co, ho * wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols = _patch(xp, i, j, stride, ho, wo).reshape(n, c, ho * wo)
            out += np.matmul(taps[i, j], cols)
    return out.reshape(n, co, ho, wo)


def _correlate_adjoint(g: np.ndarray, w: np.ndarray, stride: int, hp: int, wp: int) -> np.ndarray:
    """Adjoint of :func:`_correlate` with respect to its padded input."""
    n, co, ho, wo = g.shape
    _, c, kh, kw = w.shape
    if kh == 1 and kw == 1 and stride == 1 and hp == ho and wp == wo:
        return np.matmul(np.ascontiguousarray(w[:, :, 0, 0].T), g.reshape(n, co, ho * wo)).reshape(n, c, ho, wo)
    taps = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    out = np.zeros((n, c, hp, wp), dtype=g.dtype)
    gf = g.reshape(n, co, ho * wo)
    for i in range(kh):
        for j in range(kw):
            contrib = np.matmul(taps[i, j], gf).reshape(n, c, ho, wo)
            _patch(out, i, j, stride, ho, wo)[...] += contrib
    return out


def _correlate_wgrad(xp: np.ndarray, g: np.ndarray, stride: int, kh: int, kw: int) -> np.ndarray:
    """Gradient of :func:`_correlate` with respect to its kernel."""
    n, c = xp.shape[:2]
    _, co, ho, wo = g.shape
    gf = g.reshape(n, co, ho * wo)
    dw = np.empty((co, c, kh, kw), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            cols = _patch(xp, i, j, stride, ho, wo).reshape(n, c, ho * wo)
            dw[:, :, i, j] = np.tensordot(gf, cols, axes=([0, 2], [0, 2]))
    return dw


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def deconv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    _require_4d(x, "conv2d")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be {ho}x{wo} for input {h}x{w}, kernel {kh}x{kw}")
    xp = _pad(x.data, padding)
    out = _correlate(xp, weight.data, stride, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, co, 1, 1)
    result = _make(out, "conv2d")

    tape = needs_grad(x, weight, bias)
    if tape is not None:
        hp, wp = xp.shape[2:]

        def back(g):
            dx = dw = db = None
            if x.requires_grad:
                dxp = _correlate_adjoint(g, weight.data, stride, hp, wp)
                dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
            if weight.requires_grad:
                dw = _correlate_wgrad(xp, g, stride, kh, kw)
            if bias is not None and bias.requires_grad:
                db = g.sum(axis=(0, 2, 3))
            return dx, dw, db

        tape.record("conv2d", result, (x, weight, bias), back)
    return result


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    _require_4d(x, "transposed_conv2d")
    if stride < 1 or padding < 0:
        raise ValueError("transposed_conv2d needs stride >= 1 and padding >= 0")
    n, c, h, w = x.shape
    ci, co, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"transposed_conv2d channel mismatch: input has {c}, weight expects {ci}")
    ho = deconv_output_size(h, kh, stride, padding)
    wo = deconv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed_conv2d output would be {ho}x{wo}")
    hp = (h - 1) * stride + kh
    wp = (w - 1) * stride + kw
    full = _correlate_adjoint(x.data, weight.data, stride, hp, wp)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, co, 1, 1)
    result = _make(out, "transposed_conv2d")

    tape = needs_grad(x, weight, bias)
    if tape is not None:

        def back(g):
            dx = dw = db = None
            gp = np.zeros((n, co, hp, wp), dtype=g.dtype)
            gp[:, :, padding : padding + ho, padding : padding + wo] = g
            if x.requires_grad:
                dx = _correlate(gp, weight.data, stride, h, w)
            if weight.requires_grad:
                # same outer products as the conv kernel gradient, roles swapped
                dw = _correlate_wgrad(gp, x.data, stride, kh, kw)
            if bias is not None and bias.requires_grad:
                db = g.sum(axis=(0, 2, 3))
            return dx, dw, db

        tape.record("transposed_conv2d", result, (x, weight, bias), back)
    return result


# --------------------------------------------------------------------------
# pooling


def pool2d(x: Tensor, mode: str = "max", k: int = 2, stride: int = 2) -> Tensor:
    _require_4d(x, "pool2d")
    if mode not in ("max", "avg"):
        raise ValueError(f"pool mode must be 'max' or 'avg', got {mode!r}")
    n, c, h, w = x.shape
    if k < 1 or stride < 1:
        raise ValueError("pool2d needs k >= 1 and stride >= 1")
    if k > h or k > w:
        raise ShapeError(f"pool window {k} exceeds input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    xd = x.data
    if mode == "avg":
        out = np.zeros((n, c, ho, wo), dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                out += _patch(xd, i, j, stride, ho, wo)
        out *= 1.0 / (k * k)
        argmax = None
    else:
        stacked = np.stack([_patch(xd, i, j, stride, ho, wo) for i in range(k) for j in range(k)])
        argmax = stacked.argmax(axis=0)  # first maximum wins on ties
        out = np.take_along_axis(stacked, argmax[None], axis=0)[0]
    result = _make(out, "pool2d")

    tape = needs_grad(x)
    if tape is not None:

        def back(g):
            dx = np.zeros_like(xd)
            for idx in range(k * k):
                i, j = divmod(idx, k)
                if mode == "avg":
                    _patch(dx, i, j, stride, ho, wo)[...] += g * (1.0 / (k * k))
                else:
                    _patch(dx, i, j, stride, ho, wo)[...] += np.where(argmax == idx, g, 0.0)
            return (dx,)

        tape.record("pool2d", result, (x,), back)
    return result


def global_avg_pool(x: Tensor) -> Tensor:
    _require_4d(x, "global_avg_pool")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("global_avg_pool on empty spatial extent")
    result = _make(x.data.mean(axis=(2, 3), keepdims=True), "global_avg_pool")
    tape = needs_grad(x)
    if tape is not None:
        tape.record(
            "global_avg_pool",
            result,
            (x,),
            lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),),
        )
    return result


# --------------------------------------------------------------------------
# normalization and activation


@dataclass
class BatchNormParams:
    """Per-channel affine parameters plus running statistics.

    ``running_var`` is updated with the biased batch variance, the same
    statistic used to normalize in train mode.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, eps: float = 1e-5, momentum: float = 0.1) -> "BatchNormParams":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype)),
            beta=Tensor(np.zeros(channels, dtype=dtype)),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def validate(self) -> None:
        c = self.channels
        for name in ("beta", "running_mean", "running_var"):
            v = getattr(self, name)
            if np.shape(getattr(v, "data", v)) != (c,):
                raise ShapeError(f"batch norm {name} must have length {c}")
        if not self.eps > 0:
            raise ValueError(f"batch norm eps must be positive, got {self.eps}")
        if not 0 < self.momentum <= 1:
            raise ValueError(f"batch norm momentum must be in (0, 1], got {self.momentum}")
        if (self.running_var < 0).any():
            raise ValueError("batch norm running_var has negative entries")


def batch_norm(x: Tensor, params: BatchNormParams, mode: str = EVAL) -> Tensor:
    _require_4d(x, "batch_norm")
    _check_mode(mode)
    params.validate()
    n, c, h, w = x.shape
    if c != params.channels:
        raise ShapeError(f"batch_norm channel mismatch: input has {c}, params have {params.channels}")
    gamma = params.gamma.data.astype(x.dtype, copy=False).reshape(1, c, 1, 1)
    beta = params.beta.data.astype(x.dtype, copy=False).reshape(1, c, 1, 1)
    xd = x.data
    m = n * h * w
    if mode == TRAIN:
        if m < 2:
            raise ShapeError("batch_norm train mode needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        centered = xd - mean.reshape(1, c, 1, 1)
        var = np.square(centered).mean(axis=(0, 2, 3))
        mom = params.momentum
        params.running_mean[...] = (1 - mom) * params.running_mean + mom * mean
        params.running_var[...] = (1 - mom) * params.running_var + mom * var
    else:
        mean = params.running_mean.astype(x.dtype, copy=False)
        var = params.running_var.astype(x.dtype, copy=False)
        centered = xd - mean.reshape(1, c, 1, 1)
    inv_std = (1.0 / np.sqrt(var + params.eps)).astype(x.dtype, copy=False).reshape(1, c, 1, 1)
    xhat = centered * inv_std
    result = _make(gamma * xhat + beta, "batch_norm")

    tape = needs_grad(x, params.gamma, params.beta)
    if tape is not None:

        def back(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3)) if params.gamma.requires_grad else None
            dbeta = g.sum(axis=(0, 2, 3)) if params.beta.requires_grad else None
            dx = None
            if x.requires_grad:
                dxhat = g * gamma
                if mode == TRAIN:
                    s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                    dx = inv_std * (dxhat - s1 / m - xhat * (s2 / m))
                else:
                    dx = dxhat * inv_std
            return dx, dgamma, dbeta

        tape.record("batch_norm", result, (x, params.gamma, params.beta), back)
    return result


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    result = _make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), "relu")
    tape = needs_grad(x)
    if tape is not None:
        tape.record("relu", result, (x,), lambda g: (g * mask,))
    return result


# --------------------------------------------------------------------------
# resampling and layout


def _interp_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense ``(n_out, n_in)`` matrix of the 1-D half-pixel linear map."""
    i0, i1, frac = _interp_axis(n_in, n_out)
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - frac)
    np.add.at(mat, (rows, i1), frac)
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _require_4d(x, "bilinear_resize")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize to zero size {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        out = x.data.copy()
    else:
        dt = x.dtype
        y0, y1, fy = _interp_axis(h, out_h)
        x0, x1, fx = _interp_axis(w, out_w)
        fy = fy.astype(dt).reshape(1, 1, out_h, 1)
        fx = fx.astype(dt)
        rows = x.data[:, :, y0, :] * (1 - fy) + x.data[:, :, y1, :] * fy
        out = rows[:, :, :, x0] * (1 - fx) + rows[:, :, :, x1] * fx
    result = _make(out, "bilinear_resize")

    tape = needs_grad(x)
    if tape is not None:

        def back(g):
            if (out_h, out_w) == (h, w):
                return (g,)
            ry = interpolation_matrix(h, out_h).astype(g.dtype)
            rx = interpolation_matrix(w, out_w).astype(g.dtype)
            return (np.matmul(ry.T, np.matmul(g, rx)),)

        tape.record("bilinear_resize", result, (x,), back)
    return result


def concat_channels(inputs: list[Tensor]) -> Tensor:
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    for t in inputs:
        _require_4d(t, "concat_channels")
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels mismatch: {inputs[0].shape} vs {t.shape}")
    dtype = np.result_type(*[t.dtype for t in inputs])
    out = np.concatenate([t.data.astype(dtype, copy=False) for t in inputs], axis=1)
    result = Tensor(out)
    tape = needs_grad(*inputs)
    if tape is not None:
        bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

        def back(g):
            return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(inputs)))

        tape.record("concat_channels", result, tuple(inputs), back)
    return result


def dropout(x: Tensor, p: float, mode: str = EVAL, rng: RngState | None = None) -> Tensor:
    _check_mode(mode)
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if mode == EVAL or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an RngState")
    keep = rng.uniform(x.shape) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale
    result = _make(x.data * mask, "dropout")
    tape = needs_grad(x)
    if tape is not None:
        tape.record("dropout", result, (x,), lambda g: (g * mask,))
    return result


# --------------------------------------------------------------------------
# loss


def cross_entropy_and_grad(
    logits: np.ndarray, labels: np.ndarray, class_weights: np.ndarray | None = None, ignore_index: int = 255
) -> tuple[float, np.ndarray]:
    """Class-weighted softmax cross-entropy, mean over non-ignored pixels.

    Returns the loss and its gradient with respect to ``logits``.
    """
    if logits.ndim != 4:
        raise ShapeError(f"logits must be (N, C, H, W), got {logits.shape}")
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if class_weights is None:
        class_weights = np.ones(c)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if class_weights.shape != (c,):
        raise ShapeError(f"class_weights must have length {c}")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        raise ValueError(f"label {labels[bad].flat[0]} out of range [0, {c}) and not ignore_index {ignore_index}")
    count = int(valid.sum())
    if count == 0:
        raise ValueError("all pixels are ignore_index; loss undefined")
    safe = np.where(valid, labels, 0).astype(np.intp)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_prob = np.take_along_axis(shifted, safe[:, None], axis=1)[:, 0] - np.log(denom[:, 0])
    pix_w = np.where(valid, class_weights[safe], 0.0).astype(logits.dtype)
    loss = float(-(pix_w * log_prob).sum() / count)
    prob = exp / denom
    onehot = np.zeros_like(prob)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    grad = (prob - onehot) * (pix_w / count)[:, None]
    return loss, grad.astype(logits.dtype, copy=False)


def weighted_cross_entropy(
    logits: Tensor, labels: np.ndarray, class_weights=None, ignore_index: int = 255
) -> Tensor:
    """Scalar loss tensor; records the logit gradient on the active tape."""
    loss, grad = cross_entropy_and_grad(logits.data, labels, class_weights, ignore_index)
    if not np.isfinite(loss):
        raise NonFiniteError("weighted_cross_entropy produced a non-finite loss")
    result = Tensor(np.asarray(loss, dtype=logits.dtype))
    tape = needs_grad(logits)
    if tape is not None:
        tape.record("weighted_cross_entropy", result, (logits,), lambda g: (grad * g,))
    return result


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements; a convenience loss for gradient checks."""
    result = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    tape = needs_grad(x)
    if tape is not None:
        tape.record("sum_all", result, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    return result


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(x * weights)`` with a constant weight array."""
    weights = np.asarray(weights, dtype=x.dtype)
    result = Tensor(np.asarray((x.data * weights).sum(), dtype=x.dtype))
    tape = needs_grad(x)
    if tape is not None:
        tape.record("weighted_sum", result, (x,), lambda g: (g * weights,))
    return result


__all__ = [
    "BatchNormParams",
    "EVAL",
    "TRAIN",
    "as_tensor",
    "batch_norm",
    "bilinear_resize",
    "concat_channels",
    "conv2d",
    "conv_output_size",
    "cross_entropy_and_grad",
    "deconv_output_size",
    "dropout",
    "global_avg_pool",
    "interpolation_matrix",
    "pool2d",
    "relu",
    "sum_all",
    "transposed_conv2d",
    "weighted_cross_entropy",
    "weighted_sum",
]
