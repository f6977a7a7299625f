"""Finite-difference audit of every training loss composed with the encoder.

Each case builds a tiny random encoder, flattens everything the loss depends
on into one vector and compares the analytic gradient with central
differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import contrast, encoder as enc, gmm as gm
from .encoder import EncoderParameters, Sentence
from .gmm import GmmParameters
from .numerics import grad_check, make_rng


@dataclass
class SuiteCase:
    loss: str
    seed: int
    coordinates: int
    max_rel_error: float
    passed: bool

    def to_json(self) -> dict:
        return {"loss": self.loss, "seed": self.seed, "coordinates": self.coordinates,
                "max_rel_error": self.max_rel_error, "passed": self.passed}


def _sentences(rng, count: int, vocab: int) -> list:
    return [Sentence(tuple(rng.integers(0, vocab, size=int(rng.integers(2, 6)))), 0)
            for _ in range(count)]


def _gmm_unflat(template: GmmParameters, flat: np.ndarray) -> GmmParameters:
    out = template.copy()
    offset = 0
    for a in out.arrays():
        a[...] = flat[offset:offset + a.size].reshape(a.shape)
        offset += a.size
    return out


def _gmm_flat(params: GmmParameters) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays()])


def _infonce_case(rng, params: EncoderParameters, tau: float):
    xs, ys = _sentences(rng, 3, params.vocab_size), _sentences(rng, 3, params.vocab_size)
    shape = params.shape()

    def loss(theta):
        p = EncoderParameters.from_flat(shape, theta)
        return contrast.infonce_in_batch(enc.encode_batch(p, xs), enc.encode_batch(p, ys), tau)[0]

    _, gx, gy = contrast.infonce_in_batch(enc.encode_batch(params, xs), enc.encode_batch(params, ys), tau)
    grads = enc.encode_backward(params, xs + ys, np.vstack([gx, gy]))
    return loss, params.flat(), grads.flat()


def _mle_case(rng, params: EncoderParameters, num_ranks: int):
    xs, ys = _sentences(rng, 4, params.vocab_size), _sentences(rng, 4, params.vocab_size)
    g = gm.init_gmm(rng, num_ranks, params.dim)
    g.means += 0.3 * rng.standard_normal(g.means.shape)
    g.log_scales += 0.2 * rng.standard_normal(g.log_scales.shape)
    g.prior_logits += 0.5 * rng.standard_normal(num_ranks)
    labels = rng.integers(1, num_ranks + 1, size=len(xs))
    shape, n_enc = params.shape(), params.flat().size

    def loss(theta):
        p = EncoderParameters.from_flat(shape, theta[:n_enc])
        diffs = enc.encode_batch(p, xs) - enc.encode_batch(p, ys)
        return gm.mle_loss(_gmm_unflat(g, theta[n_enc:]), diffs, labels).loss

    diffs = enc.encode_batch(params, xs) - enc.encode_batch(params, ys)
    res = gm.mle_loss(g, diffs, labels)
    grads = enc.encode_backward(params, xs + ys, np.vstack([res.grad_diffs, -res.grad_diffs]))
    theta = np.concatenate([params.flat(), _gmm_flat(g)])
    return loss, theta, np.concatenate([grads.flat(), _gmm_flat(res.grad)])


def _ranking_case(rng, params: EncoderParameters, temps: contrast.TemperatureSchedule):
    anchors, queue = _sentences(rng, 3, params.vocab_size), _sentences(rng, 6, params.vocab_size)
    labels = rng.integers(1, len(temps) + 1, size=(len(anchors), len(queue)))
    shape = params.shape()

    def loss(theta):
        p = EncoderParameters.from_flat(shape, theta)
        return contrast.ranking_infonce_matrix(enc.encode_batch(p, anchors), enc.encode_batch(p, queue),
                                               labels, temps).loss

    res = contrast.ranking_infonce_matrix(enc.encode_batch(params, anchors),
                                          enc.encode_batch(params, queue), labels, temps)
    grads = enc.encode_backward(params, anchors + queue, np.vstack([res.grad_anchors, res.grad_queue]))
    return loss, params.flat(), grads.flat()


def gradient_suite(seeds: Iterable[int] = range(5), h: float = 1e-5, tol: float = 1e-4,
                   vocab_size: int = 12, hidden: int = 5, dim: int = 4, num_layers: int = 2,
                   num_ranks: int = 4, tau_base: float = 0.04, tau_growth: float = 1.5) -> list:
    """Check the warm-up InfoNCE, the GMM objective and ranking InfoNCE, each
    differentiated through the encoder, once per seed."""
    temps = contrast.TemperatureSchedule.geometric(num_ranks, tau_base, tau_growth)
    cases = []
    for seed in seeds:
        rng = make_rng(seed)
        params = enc.init_params(rng, vocab_size, hidden, dim, num_layers)
        # non-zero biases so their gradients are exercised away from the origin
        for b in params.biases:
            b += 0.1 * rng.standard_normal(b.shape)
        builders = [("infonce", lambda: _infonce_case(rng, params, temps.taus[0])),
                    ("gmm_mle", lambda: _mle_case(rng, params, num_ranks)),
                    ("ranking_infonce", lambda: _ranking_case(rng, params, temps))]
        for name, build in builders:
            loss, theta, analytic = build()
            report = grad_check(loss, theta, analytic, h=h, tol=tol)
            cases.append(SuiteCase(name, int(seed), int(theta.size), report.max_rel_error, report.passed))
    return cases
