"""Diagonal Gaussian mixture over embedding differences.

Component ``r`` (1-based rank) has prior ``softmax(prior_logits)[r-1]``, mean
``means[r-1]`` and per-dimension standard deviation ``exp(log_scales[r-1])``.
The prior enters the posterior exactly once; the component density itself is
the plain diagonal Gaussian.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import log_softmax

LOG_2PI = float(np.log(2.0 * np.pi))
MIN_LOG_SCALE = float(np.log(1e-4))


class GmmError(ValueError):
    pass


@dataclass
class GmmParameters:
    prior_logits: np.ndarray
    means: np.ndarray
    log_scales: np.ndarray

    def __post_init__(self):
        self.prior_logits = np.asarray(self.prior_logits, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.log_scales = np.atleast_2d(np.asarray(self.log_scales, dtype=np.float64))
        n = self.prior_logits.shape[0]
        if self.means.shape[0] != n or self.log_scales.shape != self.means.shape:
            raise GmmError("inconsistent GMM parameter shapes")

    @property
    def num_ranks(self) -> int:
        return self.prior_logits.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def priors(self) -> np.ndarray:
        return np.exp(log_softmax(self.prior_logits))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def arrays(self) -> list:
        return [self.prior_logits, self.means, self.log_scales]

    def copy(self) -> "GmmParameters":
        return GmmParameters(self.prior_logits.copy(), self.means.copy(), self.log_scales.copy())

    def clamp_scales(self) -> None:
        np.maximum(self.log_scales, MIN_LOG_SCALE, out=self.log_scales)

    def to_json(self) -> dict:
        return {"num_ranks": self.num_ranks, "dim": self.dim,
                "prior_logits": self.prior_logits.tolist(),
                "means": self.means.ravel().tolist(),
                "log_scales": self.log_scales.ravel().tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "GmmParameters":
        try:
            n, d = int(doc["num_ranks"]), int(doc["dim"])
            return cls(np.array(doc["prior_logits"], dtype=np.float64),
                       np.array(doc["means"], dtype=np.float64).reshape(n, d),
                       np.array(doc["log_scales"], dtype=np.float64).reshape(n, d))
        except (KeyError, ValueError, TypeError) as exc:
            raise GmmError(f"gmm: malformed field ({exc})") from exc


def init_gmm(rng: np.random.Generator, num_ranks: int, dim: int,
             spread: float = 1.0, scale: float = 1.0) -> GmmParameters:
    """Uniform priors, constant scales, means spread along one random direction.

    Mean r sits at ``spread * (r-1)/(N-1)`` along a random unit vector, so the
    ranks are ordered from the start. Every scale starts at ``scale``.
    """
    if num_ranks < 2:
        raise GmmError("need at least two ranks")
    if spread < 0 or scale <= 0:
        raise GmmError("spread must be non-negative and scale positive")
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    steps = spread * np.arange(num_ranks) / (num_ranks - 1)
    return GmmParameters(np.zeros(num_ranks), steps[:, None] * direction[None, :],
                         np.full((num_ranks, dim), np.log(scale)))


def _check_diff(params: GmmParameters, diff) -> np.ndarray:
    x = np.asarray(diff, dtype=np.float64)
    if x.shape[-1] != params.dim:
        raise GmmError(f"dimension mismatch: diff has {x.shape[-1]}, GMM has {params.dim}")
    return x


def component_log_densities(params: GmmParameters, diffs) -> np.ndarray:
    """Log density of every component at every diff, shape ``(M, N)``."""
    x = np.atleast_2d(_check_diff(params, diffs))
    inv = np.exp(-params.log_scales)
    z = (x[:, None, :] - params.means[None]) * inv[None]
    return (-0.5 * params.dim * LOG_2PI - params.log_scales.sum(axis=1)[None]
            - 0.5 * (z * z).sum(axis=2))


def gaussian_log_density(params: GmmParameters, r: int, diff) -> float:
    if not 1 <= r <= params.num_ranks:
        raise GmmError(f"rank {r} outside [1, {params.num_ranks}]")
    x = _check_diff(params, diff)
    if x.ndim != 1:
        raise GmmError("diff must be a single vector")
    return float(component_log_densities(params, x)[0, r - 1])


def log_joint(params: GmmParameters, diffs) -> np.ndarray:
    """``log pi_r + log N_r(diff)`` for every diff and rank."""
    return log_softmax(params.prior_logits)[None] + component_log_densities(params, diffs)


def posterior_batch(params: GmmParameters, diffs) -> np.ndarray:
    return np.exp(log_softmax(log_joint(params, diffs), axis=1))


def posterior(params: GmmParameters, diff) -> np.ndarray:
    x = _check_diff(params, diff)
    if x.ndim != 1:
        raise GmmError("diff must be a single vector")
    return posterior_batch(params, x)[0]


def predict_ranks(params: GmmParameters, diffs) -> np.ndarray:
    """1-based argmax ranks; ties go to the smaller rank."""
    return np.argmax(log_joint(params, diffs), axis=1) + 1


def predict_rank(params: GmmParameters, emb_x, emb_y) -> int:
    diff = np.asarray(emb_x, dtype=np.float64) - np.asarray(emb_y, dtype=np.float64)
    return int(predict_ranks(params, diff)[0])


@dataclass
class MleResult:
    loss: float
    grad: GmmParameters
    grad_diffs: np.ndarray


def mle_loss(params: GmmParameters, diffs, labels) -> MleResult:
    """Mean negative log posterior of the labelled ranks.

    Gradients are returned for every GMM field and for the diffs themselves
    (the latter lets the loss be chained through the encoder).
    """
    x = np.atleast_2d(_check_diff(params, diffs))
    labels = np.asarray(labels, dtype=np.int64).ravel()
    m = x.shape[0]
    if m == 0:
        raise GmmError("empty batch")
    if labels.shape[0] != m:
        raise GmmError("labels and diffs have different lengths")
    if labels.min() < 1 or labels.max() > params.num_ranks:
        raise GmmError("label outside [1, N]")

    logp = log_softmax(log_joint(params, x), axis=1)
    idx = labels - 1
    loss = float(-logp[np.arange(m), idx].mean())

    # d loss / d (log pi_r + log N_r) = q_r - onehot_r, averaged over the batch
    delta = np.exp(logp)
    delta[np.arange(m), idx] -= 1.0
    delta /= m

    inv2 = np.exp(-2.0 * params.log_scales)
    centred = x[:, None, :] - params.means[None]          # (M, N, d)
    weighted = delta[:, :, None] * centred * inv2[None]    # delta_r (x - mu_r) / sigma_r^2
    grad = GmmParameters(
        prior_logits=delta.sum(axis=0),
        means=weighted.sum(axis=0),
        log_scales=(delta[:, :, None] * (centred * centred * inv2[None] - 1.0)).sum(axis=0),
    )
    grad_diffs = -weighted.sum(axis=1)
    return MleResult(loss=loss, grad=grad, grad_diffs=grad_diffs)
