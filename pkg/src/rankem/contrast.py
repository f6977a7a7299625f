"""Contrastive objectives and the encoder-side rank machinery.

All similarity here is the dot product of unit vectors (cosine).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import masked_logsumexp


class ContrastError(ValueError):
    pass


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContrastError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(a @ b)


# ---------------------------------------------------------------------------
# temperatures and anchors


@dataclass(frozen=True)
class TemperatureSchedule:
    taus: tuple

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        if not taus or taus[0] <= 0 or any(b <= a for a, b in zip(taus, taus[1:])):
            raise ContrastError("temperatures must be positive and strictly increasing")
        object.__setattr__(self, "taus", taus)

    @classmethod
    def geometric(cls, num_ranks: int, base: float = 0.04, growth: float = 1.5) -> "TemperatureSchedule":
        return cls(tuple(base * growth ** r for r in range(num_ranks)))

    def __len__(self):
        return len(self.taus)


@dataclass(frozen=True)
class AnchorSet:
    s: tuple
    momentum: float = 0.999

    def __post_init__(self):
        object.__setattr__(self, "s", tuple(float(v) for v in self.s))
        if not all(math.isfinite(v) for v in self.s):
            raise ContrastError("anchors must be finite")
        if not 0.0 <= self.momentum <= 1.0:
            raise ContrastError("anchor momentum must lie in [0, 1]")

    @classmethod
    def initial(cls, num_ranks: int, momentum: float = 0.999) -> "AnchorSet":
        # decreasing with rank: rank 1 (paraphrase) starts at similarity 1
        return cls(tuple((num_ranks - r + 1) / num_ranks for r in range(1, num_ranks + 1)), momentum)

    @property
    def values(self) -> np.ndarray:
        return np.array(self.s)

    def __len__(self):
        return len(self.s)


def predict_rank_encoder(anchors: AnchorSet, sim: float) -> int:
    """Rank whose anchor is nearest to ``sim``; ties go to the smaller rank."""
    return int(np.argmin(np.abs(float(sim) - anchors.values))) + 1


def predict_ranks_encoder(anchors: AnchorSet, sims) -> np.ndarray:
    sims = np.asarray(sims, dtype=np.float64)
    dist = np.abs(sims[..., None] - anchors.values)
    return np.argmin(dist, axis=-1) + 1


def update_anchor(anchors: AnchorSet, r: int, sim: float) -> AnchorSet:
    if not 1 <= r <= len(anchors):
        raise ContrastError(f"rank {r} outside [1, {len(anchors)}]")
    if not math.isfinite(sim):
        raise ContrastError("similarity must be finite")
    eps = anchors.momentum
    s = list(anchors.s)
    s[r - 1] = eps * s[r - 1] + (1.0 - eps) * float(sim)
    return AnchorSet(tuple(s), eps)


def update_anchors_sequence(anchors: AnchorSet, ranks, sims) -> AnchorSet:
    """Apply :func:`update_anchor` for every ``(rank, sim)`` in order.

    Uses the closed form of the repeated moving average,
    ``s_n = eps^n s_0 + (1 - eps) * sum_j eps^(n-j) sim_j``, per rank.
    """
    ranks = np.asarray(ranks, dtype=np.int64).ravel()
    sims = np.asarray(sims, dtype=np.float64).ravel()
    eps = anchors.momentum
    s = list(anchors.s)
    for r in range(1, len(s) + 1):
        vals = sims[ranks == r]
        n = vals.size
        if n == 0:
            continue
        if eps == 0.0:
            s[r - 1] = float(vals[-1])
            continue
        powers = eps ** np.arange(n - 1, -1, -1, dtype=np.float64)
        s[r - 1] = float(eps ** n * s[r - 1] + (1.0 - eps) * (powers * vals).sum())
    return AnchorSet(tuple(s), eps)


# ---------------------------------------------------------------------------
# InfoNCE


@dataclass
class InfoNceResult:
    loss: float
    grad_anchor: np.ndarray
    grad_positive: np.ndarray
    grad_negatives: np.ndarray


def infonce(anchor, positive, negatives, tau: float) -> InfoNceResult:
    """``-log softmax`` of the positive's scaled similarity against negatives."""
    if tau <= 0:
        raise ContrastError("temperature must be positive")
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if negatives.size == 0:
        raise ContrastError("at least one negative is required")
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(positive, dtype=np.float64)
    cands = np.vstack([p[None], negatives])
    logits = cands @ a / tau
    shift = logits.max()
    probs = np.exp(logits - shift)
    lse = shift + np.log(probs.sum())
    probs /= probs.sum()
    loss = float(lse - logits[0])
    coef = probs.copy()
    coef[0] -= 1.0
    coef /= tau
    return InfoNceResult(loss=loss, grad_anchor=coef @ cands,
                         grad_positive=coef[0] * a, grad_negatives=coef[1:, None] * a[None])


def infonce_in_batch(x: np.ndarray, y: np.ndarray, tau: float):
    """Mean InfoNCE where row i of ``y`` is the positive for row i of ``x``
    and every other row of ``y`` is a negative.

    Returns ``(loss, grad_x, grad_y)``.
    """
    b = x.shape[0]
    if b < 2:
        raise ContrastError("in-batch negatives need a batch of at least 2")
    logits = x @ y.T / tau
    shift = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - shift)
    lse = shift[:, 0] + np.log(e.sum(axis=1))
    loss = float((lse - np.diag(logits)).mean())
    coef = e / e.sum(axis=1, keepdims=True)
    coef[np.arange(b), np.arange(b)] -= 1.0
    coef /= tau * b
    return loss, coef @ y, coef.T @ x


# ---------------------------------------------------------------------------
# ranking InfoNCE


@dataclass
class RankedBatch:
    """An anchor and, for each rank 1..N, the embeddings labelled with it."""

    anchor: np.ndarray
    groups: list = field(default_factory=list)

    def stacked(self):
        dim = np.asarray(self.anchor).shape[0]
        members, labels = [], []
        for r, g in enumerate(self.groups, start=1):
            g = np.asarray(g, dtype=np.float64).reshape(-1, dim)
            members.append(g)
            labels.extend([r] * g.shape[0])
        return np.vstack(members) if members else np.zeros((0, dim)), np.array(labels, dtype=np.int64)


@dataclass
class RankingResult:
    loss: float
    grad_anchors: np.ndarray
    grad_queue: np.ndarray
    terms: np.ndarray


def ranking_infonce_matrix(anchors: np.ndarray, queue: np.ndarray, labels: np.ndarray,
                           temps: TemperatureSchedule) -> RankingResult:
    """Ranking InfoNCE averaged over anchors.

    ``labels[i, k]`` is the rank of queue member k relative to anchor i. For
    each rank r < N, the members labelled r are positives against every member
    labelled r or worse, at temperature ``tau_r``. A term whose positive group
    is empty is skipped. ``terms[i, r-1]`` holds the per-term log ratio (<= 0).
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    queue = np.atleast_2d(np.asarray(queue, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(anchors.shape[0], queue.shape[0])
    n_anchor = anchors.shape[0]
    n_ranks = len(temps)
    terms = np.zeros((n_anchor, max(n_ranks - 1, 0)))
    grad_sims = np.zeros((n_anchor, queue.shape[0]))
    if n_anchor == 0 or queue.shape[0] == 0:
        return RankingResult(0.0, np.zeros_like(anchors), np.zeros_like(queue), terms)
    sims = anchors @ queue.T
    for r in range(1, n_ranks):
        tau = temps.taus[r - 1]
        logits = sims / tau
        pos = labels == r
        den = labels >= r
        active = pos.any(axis=1)
        if not active.any():
            continue
        lse_pos = masked_logsumexp(logits, pos)
        lse_den = masked_logsumexp(logits, den)
        with np.errstate(invalid="ignore"):  # inactive rows give -inf - -inf
            term = np.where(active, lse_pos - lse_den, 0.0)
        terms[:, r - 1] = term
        # d(-term)/d logits = p_den - p_pos, only on active rows
        safe_pos = np.where(active, lse_pos, 0.0)[:, None]
        safe_den = np.where(active, lse_den, 0.0)[:, None]
        p_pos = np.where(pos, np.exp(logits - safe_pos), 0.0)
        p_den = np.where(den, np.exp(logits - safe_den), 0.0)
        grad_sims += np.where(active[:, None], (p_den - p_pos) / tau, 0.0)
    loss = float(-terms.sum() / n_anchor)
    grad_sims /= n_anchor
    return RankingResult(loss=loss, grad_anchors=grad_sims @ queue,
                         grad_queue=grad_sims.T @ anchors, terms=terms)


def ranking_infonce(batch: RankedBatch, temps: TemperatureSchedule) -> RankingResult:
    """Ranking InfoNCE for a single anchor. ``grad_queue`` rows follow the
    order of ``batch.groups`` concatenated."""
    if len(batch.groups) > len(temps):
        raise ContrastError("more rank groups than temperatures")
    members, labels = batch.stacked()
    return ranking_infonce_matrix(np.asarray(batch.anchor)[None], members, labels[None], temps)


# ---------------------------------------------------------------------------
# virtual examples


def soft_rank(lam: float, num_ranks: int) -> int:
    r = math.ceil((1.0 - lam) * 1 + lam * num_ranks)
    return min(max(r, 1), num_ranks)


def interpolate_virtual(emb_y, emb_neg, lam: float, num_ranks: int):
    """Convex combination of a positive and a negative plus its soft rank.

    The virtual point is not re-normalised; it only ever feeds the GMM.
    """
    if not 0.0 <= lam <= 1.0:
        raise ContrastError("lambda must lie in [0, 1]")
    y = np.asarray(emb_y, dtype=np.float64)
    n = np.asarray(emb_neg, dtype=np.float64)
    return (1.0 - lam) * y + lam * n, soft_rank(lam, num_ranks)


def soft_ranks(lams: Sequence[float], num_ranks: int) -> np.ndarray:
    lams = np.asarray(lams, dtype=np.float64)
    r = np.ceil((1.0 - lams) + lams * num_ranks).astype(np.int64)
    return np.clip(r, 1, num_ranks)
