"""Two-phase training loop.

Phase 1 warms up the encoder (in-batch InfoNCE) and the GMM (rank 1 for
translations, rank N for in-batch outliers, interpolated virtual pairs in
between) on parallel data. Phase 2 runs the EM loop on monolingual
sentences only: the GMM labels (anchor, queue) pairs to train the encoder with
ranking InfoNCE, and the anchor similarities label the same pairs to train
the GMM.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional, Sequence

import numpy as np

from . import contrast, encoder as enc, gmm as gm
from .contrast import AnchorSet, TemperatureSchedule
from .encoder import EncoderParameters, Sentence
from .gmm import GmmParameters
from .numerics import make_rng, rng_from_state, rng_state

FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    num_ranks: int = 4
    dim: int = 16
    hidden: int = 32
    num_layers: int = 2
    vocab_size: int = 300
    num_languages: int = 6
    init_share: float = 0.0
    tau_base: float = 0.04
    tau_growth: float = 1.5
    queue_size: int = 256
    moco_momentum: float = 0.999
    anchor_momentum: float = 0.999
    gmm_lr: float = 3e-5
    encoder_lr: float = 5e-4
    warmup_gmm_lr: Optional[float] = None
    warmup_encoder_lr: Optional[float] = None
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    virtuals_per_pair: int = 2
    gmm_init_spread: float = 1.0
    gmm_init_scale: float = 1.0
    warm_anchors: bool = False
    phase1_steps: int = 500
    phase2_steps: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.num_ranks < 2:
            raise ValueError("num_ranks must be >= 2")
        if self.queue_size < self.batch_size:
            raise ValueError("queue_size must be >= batch_size")
        rates = [self.gmm_lr, self.encoder_lr, self.warmup_gmm_lr, self.warmup_encoder_lr]
        if any(r is not None and r <= 0 for r in rates):
            raise ValueError("learning rates must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.gmm_init_spread < 0 or self.gmm_init_scale <= 0:
            raise ValueError("gmm_init_spread must be >= 0 and gmm_init_scale > 0")
        if self.virtuals_per_pair < 0 or self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ValueError("step counts and virtuals_per_pair must be non-negative")

    def phase_rates(self, phase: int) -> tuple:
        """(encoder peak rate, GMM rate) used in ``phase``."""
        if phase == 1:
            return (self.warmup_encoder_lr or self.encoder_lr, self.warmup_gmm_lr or self.gmm_lr)
        return self.encoder_lr, self.gmm_lr

    @property
    def temps(self) -> TemperatureSchedule:
        return TemperatureSchedule.geometric(self.num_ranks, self.tau_base, self.tau_growth)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Preset tuned for the default synthetic corpus on one CPU core."""
        base = dict(init_share=0.9, gmm_lr=1e-3, encoder_lr=5e-4,
                    warmup_gmm_lr=1e-2, warmup_encoder_lr=5e-3,
                    gmm_init_spread=0.2, gmm_init_scale=0.2, warm_anchors=True,
                    moco_momentum=0.99, anchor_momentum=0.999)
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------------------
# optimisers


class Adam:
    """Adam over a fixed list of arrays, updated in place."""

    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8, kind="adam"):
        self.beta1, self.beta2, self.eps, self.kind = beta1, beta2, eps, kind
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list, grads: list, lr: float) -> None:
        self.t += 1
        if self.kind == "sgd":
            for p, g in zip(params, grads):
                p -= lr * g
            return
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def to_json(self) -> dict:
        return {"t": self.t, "m": np.concatenate([a.ravel() for a in self.m]).tolist(),
                "v": np.concatenate([a.ravel() for a in self.v]).tolist()}

    def load_json(self, doc: dict, name: str) -> None:
        try:
            self.t = int(doc["t"])
            for key in ("m", "v"):
                flat = np.asarray(doc[key], dtype=np.float64)
                target = getattr(self, key)
                if flat.size != sum(a.size for a in target):
                    raise CheckpointError(f"optimizer.{name}.{key}: wrong length")
                off = 0
                for a in target:
                    a[...] = flat[off:off + a.size].reshape(a.shape)
                    off += a.size
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise CheckpointError(f"optimizer.{name}: malformed ({exc})") from exc


def cosine_lr(peak: float, step: int, total: int) -> float:
    if total <= 0:
        return peak
    return peak * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


# ---------------------------------------------------------------------------
# state


class EmQueue:
    """FIFO of momentum-encoder embeddings with their language ids."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self.embeddings = np.zeros((0, dim))
        self.languages = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return self.embeddings.shape[0]

    def enqueue(self, embeddings: np.ndarray, languages) -> None:
        self.embeddings = np.vstack([self.embeddings, embeddings])[-self.capacity:]
        self.languages = np.concatenate([self.languages,
                                         np.asarray(languages, dtype=np.int64)])[-self.capacity:]

    def to_json(self) -> dict:
        return {"capacity": self.capacity, "dim": self.embeddings.shape[1],
                "embeddings": self.embeddings.ravel().tolist(), "languages": self.languages.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "EmQueue":
        try:
            q = cls(int(doc["capacity"]), int(doc["dim"]))
            q.embeddings = np.asarray(doc["embeddings"], dtype=np.float64).reshape(-1, q.embeddings.shape[1])
            q.languages = np.asarray(doc["languages"], dtype=np.int64)
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"queue: malformed ({exc})") from exc
        if q.languages.shape[0] != q.embeddings.shape[0]:
            raise CheckpointError("queue: languages and embeddings differ in length")
        return q


@dataclass
class TrainState:
    config: TrainConfig
    encoder: EncoderParameters
    gmm: GmmParameters
    anchors: AnchorSet
    queue: EmQueue
    enc_opt: Adam
    gmm_opt: Adam
    rng: np.random.Generator
    momentum: Optional[EncoderParameters] = None
    phase1_done: int = 0
    phase2_done: int = 0

    @property
    def step(self) -> int:
        return self.phase1_done + self.phase2_done


def init_state(config: TrainConfig) -> TrainState:
    rng = make_rng(config.seed)
    params = enc.init_params(rng, config.vocab_size, config.hidden, config.dim, config.num_layers,
                             config.num_languages, config.init_share)
    gmm_params = gm.init_gmm(rng, config.num_ranks, config.dim,
                           config.gmm_init_spread, config.gmm_init_scale)
    return TrainState(
        config=config, encoder=params, gmm=gmm_params,
        anchors=AnchorSet.initial(config.num_ranks, config.anchor_momentum),
        queue=EmQueue(config.queue_size, config.dim),
        enc_opt=_make_opt(config, params.arrays()), gmm_opt=_make_opt(config, gmm_params.arrays()),
        rng=rng)


def _make_opt(config: TrainConfig, arrays: list) -> Adam:
    return Adam([a.shape for a in arrays], config.adam_beta1, config.adam_beta2,
                config.adam_eps, config.optimizer)


def _label_hist(labels, num_ranks: int) -> list:
    return np.bincount(np.asarray(labels).ravel() - 1, minlength=num_ranks)[:num_ranks].tolist()


def _check_finite(state: TrainState, **losses) -> None:
    for name, val in losses.items():
        if not math.isfinite(val):
            raise TrainingError(f"non-finite {name} at step {state.step}")


# ---------------------------------------------------------------------------
# phase 1


def phase1_step(state: TrainState, batch: Sequence) -> dict:
    """One warm-up step on a batch of parallel ``(x, y)`` sentence pairs."""
    cfg = state.config
    b = len(batch)
    if b < 2:
        raise TrainingError("phase 1 needs a batch of at least 2 pairs")
    xs = [p[0] for p in batch]
    ys = [p[1] for p in batch]
    emb = enc.encode_batch(state.encoder, xs + ys)
    ex, ey = emb[:b], emb[b:]

    ctl, gx, gy = contrast.infonce_in_batch(ex, ey, cfg.temps.taus[0])
    enc_grad = enc.encode_backward(state.encoder, xs + ys, np.vstack([gx, gy]))

    # outlier y' != y: any other batch member
    rng = state.rng
    other = rng.integers(0, b - 1, size=b)
    other = other + (other >= np.arange(b))
    n_ranks = cfg.num_ranks
    targets = [ey, ey[other]]
    labels = [np.ones(b, dtype=np.int64), np.full(b, n_ranks, dtype=np.int64)]
    if cfg.virtuals_per_pair:
        lams = rng.uniform(0.0, 1.0, size=(b, cfg.virtuals_per_pair))
        virt = (1.0 - lams[:, :, None]) * ey[:, None, :] + lams[:, :, None] * ey[other][:, None, :]
        targets.append(virt.reshape(-1, cfg.dim))
        labels.append(contrast.soft_ranks(lams.ravel(), n_ranks))
    targets = np.vstack(targets)
    labels = np.concatenate(labels)
    sources = np.tile(ex, (len(targets) // b, 1))
    sources[2 * b:] = np.repeat(ex, cfg.virtuals_per_pair, axis=0)
    diffs = sources - targets
    mle = gm.mle_loss(state.gmm, diffs, labels)
    _check_finite(state, ctl_loss=ctl, mle_loss=mle.loss)

    enc_lr, gmm_lr = cfg.phase_rates(1)
    state.enc_opt.step(state.encoder.arrays(), enc_grad.arrays(),
                       cosine_lr(enc_lr, state.phase1_done, cfg.phase1_steps))
    state.gmm_opt.step(state.gmm.arrays(), mle.grad.arrays(), gmm_lr)
    state.gmm.clamp_scales()
    if cfg.warm_anchors:
        # known labels calibrate the anchors before any self-labelling happens
        norms = np.linalg.norm(targets, axis=1)
        sims = (sources * targets).sum(axis=1) / np.maximum(norms, 1e-12)
        state.anchors = contrast.update_anchors_sequence(state.anchors, labels, sims)
    state.phase1_done += 1
    return {"step": state.step, "phase": 1, "ctl_loss": ctl, "mle_loss": mle.loss,
            "anchors": list(state.anchors.s), "label_hist": _label_hist(labels, n_ranks)}


# ---------------------------------------------------------------------------
# phase 2


@dataclass
class EStepLabels:
    gmm_ranks: np.ndarray      # c_G*, shape (|X|, |Y|)
    encoder_ranks: np.ndarray  # c_M*, shape (|X|, |Y|)
    sims: np.ndarray
    anchor_embeddings: np.ndarray


def estep_labels(encoder_params: EncoderParameters, gmm_params: GmmParameters, anchors: AnchorSet,
                 anchor_batch: Sequence[Sentence], queue: EmQueue) -> EStepLabels:
    if len(queue) == 0:
        raise TrainingError("E-step needs a non-empty queue")
    ex = enc.encode_batch(encoder_params, anchor_batch)
    q = queue.embeddings
    sims = ex @ q.T
    diffs = (ex[:, None, :] - q[None]).reshape(-1, ex.shape[1])
    c_g = gm.predict_ranks(gmm_params, diffs).reshape(sims.shape)
    c_m = contrast.predict_ranks_encoder(anchors, sims)
    return EStepLabels(c_g, c_m, sims, ex)


def mstep_update(state: TrainState, anchor_batch: Sequence[Sentence], labels: EStepLabels) -> dict:
    cfg = state.config
    q = state.queue.embeddings
    ex = labels.anchor_embeddings
    n_ranks = cfg.num_ranks

    # (a) GMM fits the encoder's labels
    diffs = (ex[:, None, :] - q[None]).reshape(-1, cfg.dim)
    mle = gm.mle_loss(state.gmm, diffs, labels.encoder_ranks.ravel())
    # (b) encoder fits the GMM's labels; queue side is detached
    rank = contrast.ranking_infonce_matrix(ex, q, labels.gmm_ranks, cfg.temps)
    _check_finite(state, ctl_loss=rank.loss, mle_loss=mle.loss)
    enc_grad = enc.encode_backward(state.encoder, anchor_batch, rank.grad_anchors)

    enc_lr, gmm_lr = cfg.phase_rates(2)
    lr = cosine_lr(enc_lr, state.phase2_done, cfg.phase2_steps)
    state.gmm_opt.step(state.gmm.arrays(), mle.grad.arrays(), gmm_lr)
    state.gmm.clamp_scales()
    state.enc_opt.step(state.encoder.arrays(), enc_grad.arrays(), lr)

    # (c) anchors follow the similarities of their GMM-labelled pairs, (i, k) order
    state.anchors = contrast.update_anchors_sequence(state.anchors, labels.gmm_ranks.ravel(),
                                                     labels.sims.ravel())
    # (d) queue and momentum encoder
    state.queue.enqueue(enc.encode_batch(state.momentum, anchor_batch),
                        [s.language for s in anchor_batch])
    state.momentum = enc.ema_update(state.momentum, state.encoder, cfg.moco_momentum)
    state.phase2_done += 1
    return {"step": state.step, "phase": 2, "ctl_loss": rank.loss, "mle_loss": mle.loss,
            "anchors": list(state.anchors.s), "label_hist": _label_hist(labels.gmm_ranks, n_ranks)}


def _sample(rng: np.random.Generator, pool: Sequence, size: int) -> list:
    idx = rng.choice(len(pool), size=min(size, len(pool)), replace=False)
    return [pool[i] for i in idx]


def start_phase2(state: TrainState, monolingual: Sequence[Sentence]) -> None:
    """Copy the live encoder into the momentum encoder, fill the queue and
    restart both optimisers (the objectives change between phases)."""
    cfg = state.config
    state.momentum = state.encoder.copy()
    state.enc_opt = _make_opt(cfg, state.encoder.arrays())
    state.gmm_opt = _make_opt(cfg, state.gmm.arrays())
    while len(state.queue) < cfg.queue_size:
        batch = _sample(state.rng, monolingual, cfg.batch_size)
        state.queue.enqueue(enc.encode_batch(state.momentum, batch), [s.language for s in batch])


def phase2_step(state: TrainState, monolingual: Sequence[Sentence]) -> dict:
    batch = _sample(state.rng, monolingual, state.config.batch_size)
    labels = estep_labels(state.encoder, state.gmm, state.anchors, batch, state.queue)
    return mstep_update(state, batch, labels)


def train(config: TrainConfig, parallel: Sequence, monolingual: Sequence[Sentence],
          state: Optional[TrainState] = None,
          on_metrics: Optional[Callable[[dict], None]] = None,
          diagnostic_path: Optional[str] = None,
          stop_after: Optional[int] = None) -> TrainState:
    """Run whatever remains of both phases.

    ``parallel`` holds ``(Sentence, Sentence)`` translation pairs;
    ``monolingual`` holds bare Sentences, which is all phase 2 ever sees.
    ``stop_after`` caps the number of steps taken in this call.
    """
    state = state or init_state(config)
    cfg = state.config
    if cfg.phase1_steps > state.phase1_done and not parallel:
        raise TrainingError("phase 1 requires a non-empty parallel corpus")
    if cfg.phase2_steps > state.phase2_done and not monolingual:
        raise TrainingError("phase 2 requires a non-empty monolingual corpus")
    taken = 0

    def emit(metrics):
        if on_metrics is not None:
            on_metrics(metrics)

    try:
        while state.phase1_done < cfg.phase1_steps:
            if stop_after is not None and taken >= stop_after:
                return state
            emit(phase1_step(state, _sample(state.rng, parallel, cfg.batch_size)))
            taken += 1
        if cfg.phase2_steps > state.phase2_done and state.momentum is None:
            start_phase2(state, monolingual)
        while state.phase2_done < cfg.phase2_steps:
            if stop_after is not None and taken >= stop_after:
                return state
            emit(phase2_step(state, monolingual))
            taken += 1
    except TrainingError:
        if diagnostic_path:
            save_checkpoint(state, diagnostic_path)
        raise
    return state


# ---------------------------------------------------------------------------
# checkpoints


def state_to_json(state: TrainState) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": asdict(state.config),
        "shape": state.encoder.shape(),
        "flat_params": state.encoder.flat().tolist(),
        "momentum_flat_params": None if state.momentum is None else state.momentum.flat().tolist(),
        "gmm": state.gmm.to_json(),
        "anchors": {"s": list(state.anchors.s), "momentum": state.anchors.momentum},
        "queue": state.queue.to_json(),
        "optimizer": {"encoder": state.enc_opt.to_json(), "gmm": state.gmm_opt.to_json()},
        "rng": rng_state(state.rng),
        "progress": {"phase1": state.phase1_done, "phase2": state.phase2_done},
    }


def state_from_json(doc: dict) -> TrainState:
    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"format_version: expected {FORMAT_VERSION}, got {version!r}")

    def need(key):
        if key not in doc:
            raise CheckpointError(f"{key}: missing")
        return doc[key]

    try:
        config = TrainConfig.from_dict(need("config"))
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"config: {exc}") from exc
    try:
        params = EncoderParameters.from_flat(need("shape"), need("flat_params"))
        mom = need("momentum_flat_params")
        momentum = None if mom is None else EncoderParameters.from_flat(doc["shape"], mom)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"flat_params: {exc}") from exc
    try:
        gmm_params = GmmParameters.from_json(need("gmm"))
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    anchors_doc = need("anchors")
    try:
        anchors = AnchorSet(tuple(anchors_doc["s"]), float(anchors_doc["momentum"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"anchors: {exc}") from exc
    queue = EmQueue.from_json(need("queue"))
    state = init_state(config)
    state.encoder, state.momentum, state.gmm = params, momentum, gmm_params
    state.anchors, state.queue = anchors, queue
    opt = need("optimizer")
    if not isinstance(opt, dict) or "encoder" not in opt or "gmm" not in opt:
        raise CheckpointError("optimizer: missing encoder or gmm entry")
    state.enc_opt = _make_opt(config, params.arrays())
    state.enc_opt.load_json(opt["encoder"], "encoder")
    state.gmm_opt = _make_opt(config, gmm_params.arrays())
    state.gmm_opt.load_json(opt["gmm"], "gmm")
    try:
        state.rng = rng_from_state(need("rng"))
    except (TypeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"rng: {exc}") from exc
    progress = need("progress")
    try:
        state.phase1_done = int(progress["phase1"])
        state.phase2_done = int(progress["phase2"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"progress: {exc}") from exc
    return state


def save_checkpoint(state: TrainState, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(state_to_json(state), fh)
    os.replace(tmp, path)


def load_checkpoint(path) -> TrainState:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return state_from_json(doc)
