"""Dense float64 kernel: shape-checked products, SVD pseudoinverse, gradient
slots and a central-difference gradient checker.

Matrices are plain ``numpy.ndarray`` values of dtype float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import DimensionError, NumericalError

FLOAT = np.float64
EPS = np.finfo(FLOAT).eps


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=FLOAT)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.size == 0:
        raise DimensionError(f"{name} must be a nonempty 2-D array, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit shape check.

    Raises :class:`DimensionError` naming both shapes when ``a.cols != b.rows``.
    """
    a = np.asarray(a, dtype=FLOAT)
    b = np.asarray(b, dtype=FLOAT)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def pseudoinverse(p, rel_tol: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudoinverse through a thin SVD.

    Parameters
    ----------
    p : array_like, shape (m, n)
    rel_tol : float, optional
        Singular values below ``rel_tol * sigma_max`` are treated as zero.
        Defaults to ``max(m, n) * eps``.

    Returns
    -------
    ndarray, shape (n, m)
    """
    p = as_matrix(p, "pseudoinverse input")
    if not np.all(np.isfinite(p)):
        raise NumericalError("pseudoinverse input contains non-finite entries")
    if rel_tol is None:
        rel_tol = max(p.shape) * EPS
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    try:
        u, s, vt = np.linalg.svd(p, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        # LAPACK gesdd reports failure only after exhausting its internal sweeps
        raise NumericalError(f"SVD did not converge for shape {p.shape}: {exc}") from exc
    cutoff = rel_tol * (s[0] if s.size else 0.0)
    keep = s > cutoff
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (vt.T * inv) @ u.T


@dataclass
class Param:
    """A trainable array with its gradient buffer."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    requires_grad: bool = True

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=FLOAT)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def zero_grads(params: Iterable[Param]):
    for p in params:
        p.zero_grad()


def sigmoid(a):
    a = np.asarray(a, dtype=FLOAT)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: kept units are scaled by ``1 / (1 - rate)``."""
    if rate <= 0.0:
        return np.ones(shape, dtype=FLOAT)
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = rng.random(shape) >= rate
    return keep.astype(FLOAT) / (1.0 - rate)


def finite_diff_errors(
    params: Mapping[str, Param],
    loss_fn: Callable[[], float],
    step: float = 1e-5,
) -> dict[str, float]:
    """Per-parameter max relative error between ``param.grad`` and central
    differences of ``loss_fn``.

    ``param.grad`` must already hold the analytic gradient at the current
    point. Each entry is perturbed in place and restored afterwards.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    errors = {}
    for name, param in params.items():
        if not param.requires_grad:
            continue
        flat = param.value.reshape(-1)
        analytic = param.grad.reshape(-1).copy()
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        errors[name] = worst
    return errors


def finite_diff_check(params: Mapping[str, Param], loss_fn: Callable[[], float], step: float = 1e-5) -> float:
    """Max over all parameters of ``|analytic - numeric| / max(1, |numeric|)``.

    Returns 0.0 when there are no parameters.
    """
    errs = finite_diff_errors(params, loss_fn, step)
    return max(errs.values(), default=0.0)
