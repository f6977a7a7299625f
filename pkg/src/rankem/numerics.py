"""Small deterministic numerical kernel shared by the other modules.

Everything here works in float64. The random generator is numpy's PCG64,
whose stream is bit-identical across platforms for a given seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

RNG_ALGORITHM = "PCG64"


class NumericsError(ValueError):
    """Raised on invalid input to a kernel routine."""


def _as_finite(values, name: str = "values") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{name} contains non-finite entries")
    return arr


def logsumexp(values: Sequence[float]) -> float:
    """Shift-stable ``log(sum(exp(values)))`` of a non-empty finite vector."""
    arr = _as_finite(values).ravel()
    if arr.size == 0:
        raise NumericsError("empty reduction")
    shift = arr.max()
    return float(shift + np.log(np.exp(arr - shift).sum()))


def masked_logsumexp(x: np.ndarray, mask: np.ndarray, axis: int = -1) -> np.ndarray:
    """Row-wise logsumexp over entries where ``mask`` is true.

    Rows with an empty mask reduce to ``-inf``. No finiteness check; this is
    the vectorised inner loop used by the losses.
    """
    neg = np.where(mask, x, -np.inf)
    shift = neg.max(axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    total = np.where(mask, np.exp(x - shift), 0.0).sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = np.log(total) + shift
    return np.squeeze(out, axis=axis)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shift = x.max(axis=axis, keepdims=True)
    z = x - shift
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# symmetric eigendecomposition


def check_symmetric(matrix, rtol: float = 1e-12) -> np.ndarray:
    a = _as_finite(matrix, "matrix")
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise NumericsError("matrix must be square and non-empty")
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > rtol * scale:
        raise NumericsError("not symmetric")
    return a


def sym_eig(matrix, tol: float = 1e-15, max_sweeps: int = 60):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues in descending
    order and eigenvectors as the *columns* of the second array. Each
    eigenvector is sign-normalised so that its first component with absolute
    value above 1e-12 is positive.
    """
    a = check_symmetric(matrix).copy()
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    frob = np.sqrt((a * a).sum())
    if frob == 0.0:
        return np.zeros(n), v

    for _ in range(max_sweeps):
        off = np.sqrt(max((a * a).sum() - (np.diag(a) ** 2).sum(), 0.0))
        if off <= tol * frob:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    # theta^2 overflows; the rotation angle is effectively 1 / (2 theta)
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J restricted to rows/cols p, q
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq

    eigvals = np.diag(a).copy()
    order = np.argsort(-eigvals, kind="stable")
    eigvals = eigvals[order]
    v = v[:, order]
    for j in range(n):
        col = v[:, j]
        nz = np.nonzero(np.abs(col) > 1e-12)[0]
        if nz.size and col[nz[0]] < 0:
            v[:, j] = -col
    return eigvals, v


# ---------------------------------------------------------------------------
# randomness


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator with a fixed, platform-independent algorithm."""
    if seed < 0 or seed >= 2**64:
        raise NumericsError("seed must be a 64-bit unsigned integer")
    return np.random.Generator(np.random.PCG64(int(seed)))


def rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    if state["bit_generator"] != RNG_ALGORITHM:
        raise NumericsError(f"unsupported generator {state['bit_generator']}")
    return state


def rng_from_state(state: dict) -> np.random.Generator:
    if state.get("bit_generator") != RNG_ALGORITHM:
        raise NumericsError("rng state: unsupported or missing bit_generator")
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    numeric: np.ndarray
    analytic: np.ndarray
    rel_errors: np.ndarray
    tol: float
    failed: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failed

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0


def numerical_grad(loss: Callable[[np.ndarray], float], params, h: float = 1e-5) -> np.ndarray:
    if h <= 0:
        raise NumericsError("step h must be positive")
    theta = np.array(params, dtype=np.float64).ravel()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        up = float(loss(theta.copy()))
        theta[i] = orig - h
        down = float(loss(theta.copy()))
        theta[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericsError(f"non-finite loss value at coordinate {i}")
        grad[i] = (up - down) / (2.0 * h)
    return grad


def grad_check(loss, params, analytic, h: float = 1e-5, tol: float = 1e-4,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare an analytic gradient with central differences.

    The relative error of coordinate i is
    ``|a_i - n_i| / max(|a_i|, |n_i|, floor)``; ``floor`` keeps coordinates
    whose true gradient is zero from being judged on rounding noise alone.
    """
    num = numerical_grad(loss, params, h)
    ana = np.asarray(analytic, dtype=np.float64).ravel()
    if ana.shape != num.shape:
        raise NumericsError("analytic gradient shape does not match params")
    denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
    rel = np.abs(ana - num) / denom
    failed = [int(i) for i in np.nonzero(rel > tol)[0]]
    return GradCheckReport(numeric=num, analytic=ana, rel_errors=rel, tol=tol, failed=failed)
