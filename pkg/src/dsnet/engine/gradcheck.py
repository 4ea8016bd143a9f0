"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .functional import weighted_sum
from .tensor import Tape, Tensor

# Denominator floor for the elementwise relative error, as a fraction of the
# largest gradient magnitude in the check (and never below this value in
# absolute terms). Central differences at h=1e-5 carry roughly 1e-10 of
# rounding noise, so entries whose true gradient is zero (a bias followed by
# train-mode batch norm, say) cannot be judged relatively.
REL_ERR_FLOOR = 1e-5


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place, then restored)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_ERR_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    seed: int = 0,
) -> list[float]:
    """Compare tape gradients of ``sum(fn(*inputs) * R)`` with finite differences.

    ``R`` is a fixed random projection so every output element contributes.
    ``fn`` must be deterministic (reseed any RNG it uses inside). Returns the
    max relative error per input.
    """
    for t in inputs:
        t.requires_grad = True
    probe = fn(*inputs)
    proj = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar() -> float:
        return float((fn(*inputs).data.astype(np.float64) * proj).sum())

    with Tape() as tape:
        loss = weighted_sum(fn(*inputs), proj)
    grads = tape.backward(loss, wrt=inputs)
    numeric = [numerical_gradient(scalar, t.data, h) for t in inputs]
    scale = max([1.0] + [float(np.abs(n).max()) for n in numeric if n.size])
    return [relative_error(grads[t], n, REL_ERR_FLOOR * scale) for t, n in zip(inputs, numeric)]
