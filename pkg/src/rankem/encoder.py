"""Toy sentence encoder: token table, mean pooling, tanh projection stack,
L2 normalisation. Exact backward pass and MoCo-style EMA update."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class Sentence:
    tokens: tuple
    language: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if len(self.tokens) == 0:
            raise EncoderError("sentence must contain at least one token")
        if any(t < 0 for t in self.tokens):
            raise EncoderError("token ids must be non-negative")
        if self.language < 0:
            raise EncoderError("language id must be non-negative")


@dataclass
class EncoderParameters:
    """Token table (vocab x h) and ``P`` affine layers.

    Layer p maps ``dims[p] -> dims[p+1]`` where ``dims = [h, h, ..., h, d]``;
    tanh sits between consecutive layers, not after the last one.
    """

    token_table: np.ndarray
    weights: list
    biases: list

    @property
    def vocab_size(self) -> int:
        return self.token_table.shape[0]

    @property
    def hidden(self) -> int:
        return self.token_table.shape[1]

    @property
    def dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def shape(self) -> dict:
        return {"vocab_size": self.vocab_size, "hidden": self.hidden,
                "dim": self.dim, "num_layers": self.num_layers}

    def arrays(self) -> list:
        """Parameter arrays in declaration order."""
        out = [self.token_table]
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def copy(self) -> "EncoderParameters":
        return EncoderParameters(self.token_table.copy(),
                                 [w.copy() for w in self.weights],
                                 [b.copy() for b in self.biases])

    @classmethod
    def zeros(cls, vocab_size: int, hidden: int, dim: int, num_layers: int) -> "EncoderParameters":
        if num_layers < 1:
            raise EncoderError("need at least one projection layer")
        dims = [hidden] * num_layers + [dim]
        return cls(np.zeros((vocab_size, hidden)),
                   [np.zeros((dims[p + 1], dims[p])) for p in range(num_layers)],
                   [np.zeros(dims[p + 1]) for p in range(num_layers)])

    @classmethod
    def from_flat(cls, shape: dict, flat) -> "EncoderParameters":
        params = cls.zeros(shape["vocab_size"], shape["hidden"], shape["dim"], shape["num_layers"])
        flat = np.asarray(flat, dtype=np.float64)
        sizes = [a.size for a in params.arrays()]
        if flat.size != sum(sizes):
            raise EncoderError(f"flat_params has {flat.size} entries, shape needs {sum(sizes)}")
        offset = 0
        for a in params.arrays():
            a[...] = flat[offset:offset + a.size].reshape(a.shape)
            offset += a.size
        return params

    def same_shape(self, other: "EncoderParameters") -> bool:
        return [a.shape for a in self.arrays()] == [a.shape for a in other.arrays()]


def init_params(rng: np.random.Generator, vocab_size: int, hidden: int, dim: int,
                num_layers: int = 1, num_languages: int = 1, share: float = 0.0) -> EncoderParameters:
    """Uniform(-1/sqrt(h), 1/sqrt(h)) token table and weights, zero biases.

    With ``share > 0`` the token table is split into ``num_languages`` equal
    bands and row ``b`` of every band mixes a draw common to all bands with a
    band-specific draw, ``sqrt(share) * common + sqrt(1 - share) * own``. This
    stands in for a pretrained multilingual backbone, which would already
    relate translations across scripts.
    """
    if not 0.0 <= share <= 1.0:
        raise EncoderError("share must lie in [0, 1]")
    bound = 1.0 / np.sqrt(hidden)
    params = EncoderParameters.zeros(vocab_size, hidden, dim, num_layers)
    table = rng.uniform(-bound, bound, size=(vocab_size, hidden))
    if share > 0.0:
        if vocab_size % num_languages:
            raise EncoderError("vocab_size must be a multiple of num_languages to share rows")
        band = vocab_size // num_languages
        common = rng.uniform(-bound, bound, size=(band, hidden))
        table = np.sqrt(1.0 - share) * table + np.sqrt(share) * np.tile(common, (num_languages, 1))
    params.token_table[...] = table
    # biases start at zero: a random offset would dominate the short pooled vectors
    for w in params.weights:
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return params


def _pool_matrix(sentences: Sequence[Sentence], vocab_size: int) -> np.ndarray:
    pool = np.zeros((len(sentences), vocab_size))
    for i, s in enumerate(sentences):
        toks = np.asarray(s.tokens)
        if toks.max() >= vocab_size:
            raise EncoderError(f"token id {int(toks.max())} out of range for vocab {vocab_size}")
        np.add.at(pool[i], toks, 1.0 / len(toks))
    return pool


def _forward(params: EncoderParameters, sentences: Sequence[Sentence]):
    pool = _pool_matrix(sentences, params.vocab_size)
    acts = [pool @ params.token_table]
    pre = None
    for p, (w, b) in enumerate(zip(params.weights, params.biases)):
        pre = acts[-1] @ w.T + b
        if p < params.num_layers - 1:
            acts.append(np.tanh(pre))
    norms = np.linalg.norm(pre, axis=1)
    bad = np.nonzero(norms < 1e-12)[0]
    if bad.size:
        raise EncoderError(f"degenerate embedding for sentence {int(bad[0])}")
    emb = pre / norms[:, None]
    return emb, (pool, acts, norms)


def encode_batch(params: EncoderParameters, sentences: Sequence[Sentence]) -> np.ndarray:
    """Unit-norm embeddings, one row per sentence."""
    if len(sentences) == 0:
        return np.zeros((0, params.dim))
    return _forward(params, sentences)[0]


def encode(params: EncoderParameters, sentence: Sentence) -> np.ndarray:
    return encode_batch(params, [sentence])[0]


def encode_backward(params: EncoderParameters, sentences: Sequence[Sentence], upstream) -> EncoderParameters:
    """Gradient of ``sum_i <upstream_i, encode(params, sentences[i])>``.

    Returned as an :class:`EncoderParameters` holding gradients.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (len(sentences), params.dim):
        raise EncoderError(f"upstream shape {upstream.shape} does not match "
                           f"({len(sentences)}, {params.dim})")
    grads = EncoderParameters.zeros(params.vocab_size, params.hidden, params.dim, params.num_layers)
    if len(sentences) == 0:
        return grads
    emb, (pool, acts, norms) = _forward(params, sentences)
    # tangent projection of the normalisation: (I - g g^T) / |u|
    radial = (emb * upstream).sum(axis=1, keepdims=True)
    delta = (upstream - emb * radial) / norms[:, None]
    for p in reversed(range(params.num_layers)):
        grads.weights[p][...] = delta.T @ acts[p]
        grads.biases[p][...] = delta.sum(axis=0)
        back = delta @ params.weights[p]
        if p > 0:
            delta = back * (1.0 - acts[p] ** 2)
        else:
            delta = back
    grads.token_table[...] = pool.T @ delta
    return grads


def ema_update(slow: EncoderParameters, fast: EncoderParameters, m: float) -> EncoderParameters:
    """Return ``m * slow + (1 - m) * fast`` parameter-wise."""
    if not 0.0 <= m <= 1.0:
        raise EncoderError("momentum must lie in [0, 1]")
    if not slow.same_shape(fast):
        raise EncoderError("shape mismatch between slow and fast parameters")
    out = slow.copy()
    for s, f in zip(out.arrays(), fast.arrays()):
        s *= m
        s += (1.0 - m) * f
    return out
