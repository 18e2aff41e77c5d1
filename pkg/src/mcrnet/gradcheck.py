"""Finite-difference gradient verification.

The analytic path under test is Tensor.backward(); the oracle is a central
difference of the same forward function. The two never share code: the oracle
re-runs the forward with perturbed float64 inputs and knows nothing about the
graph.

Non-scalar outputs are reduced with a fixed random projection rather than a
plain sum; a sum would silently miss gradient components that cancel across
output elements (softmax rows, for one).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

DEFAULT_EPS = 1e-5


def _as_scalar(out: Tensor, proj: np.ndarray) -> float:
    return float((out.data * proj).sum())


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = DEFAULT_EPS,
    seed: int = 0,
    wrt: Sequence[int] | None = None,
) -> float:
    """Return the worst relative error between backward() and central differences.

    fn maps Tensors to one Tensor; inputs are float64 arrays. `wrt` limits the
    check to a subset of input positions (default: all of them).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a.copy()) for a in arrays]
    out = fn(*tensors)
    proj = np.random.default_rng(seed).standard_normal(out.data.shape)
    out.backward(proj)

    worst = 0.0
    indices = range(len(arrays)) if wrt is None else wrt
    for i in indices:
        base = arrays[i]
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = _as_scalar(fn(*[Tensor(a.copy()) for a in arrays]), proj)
            flat[j] = orig - eps
            lo = _as_scalar(fn(*[Tensor(a.copy()) for a in arrays]), proj)
            flat[j] = orig
            num_flat[j] = (hi - lo) / (2.0 * eps)
        analytic = tensors[i].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
