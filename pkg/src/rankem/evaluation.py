"""Retrieval accuracy, rank-classification accuracy and the ordering
diagnostics (mean similarity / distance per rank)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import contrast, encoder as enc, gmm as gm
from .data import CorpusRecord, ground_truth_matrix


class EvalError(ValueError):
    pass


def nearest(queries: np.ndarray, pool: np.ndarray) -> np.ndarray:
    """Index of the most cosine-similar pool row; ties go to the lowest index."""
    return np.argmax(np.atleast_2d(queries) @ np.atleast_2d(pool).T, axis=1)


def retrieval_accuracy(queries, gold, pool) -> float:
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    pool = np.atleast_2d(np.asarray(pool, dtype=np.float64))
    gold = np.asarray(gold, dtype=np.int64).ravel()
    if queries.shape[0] == 0 or queries.size == 0:
        raise EvalError("empty queries")
    if pool.shape[0] == 0 or pool.size == 0:
        raise EvalError("empty pool")
    if gold.shape[0] != queries.shape[0]:
        raise EvalError("gold indices and queries differ in length")
    if gold.min() < 0 or gold.max() >= pool.shape[0]:
        raise EvalError("gold index outside the pool")
    return float((nearest(queries, pool) == gold).mean())


def crosslingual_retrieval(params: enc.EncoderParameters, heldout: Sequence[CorpusRecord],
                           pivot: int = 0) -> dict:
    """Accuracy of retrieving the same-group pivot sentence, per query language."""
    pool_recs = sorted((r for r in heldout if r.language == pivot), key=lambda r: r.group)
    if not pool_recs:
        raise EvalError(f"no held-out records in pivot language {pivot}")
    index = {r.group: i for i, r in enumerate(pool_recs)}
    pool = enc.encode_batch(params, [r.sentence for r in pool_recs])
    out = {}
    for lang in sorted({r.language for r in heldout} - {pivot}):
        recs = [r for r in heldout if r.language == lang and r.group in index]
        if not recs:
            continue
        q = enc.encode_batch(params, [r.sentence for r in recs])
        out[lang] = retrieval_accuracy(q, [index[r.group] for r in recs], pool)
    return out


# ---------------------------------------------------------------------------
# rank classification


def gmm_predictor(params: gm.GmmParameters) -> Callable:
    return lambda a, b: gm.predict_ranks(params, np.atleast_2d(a) - np.atleast_2d(b))


def anchor_predictor(anchors: contrast.AnchorSet) -> Callable:
    return lambda a, b: contrast.predict_ranks_encoder(anchors, (np.atleast_2d(a) * np.atleast_2d(b)).sum(axis=1))


def rank_accuracy(emb_a, emb_b, gold, predictor: Callable, num_ranks: int):
    """Confusion matrix (rows gold, columns predicted) and accuracy.

    ``predictor(emb_a, emb_b)`` maps aligned rows to 1-based ranks.
    """
    gold = np.asarray(gold, dtype=np.int64).ravel()
    if gold.size == 0:
        raise EvalError("no pairs to evaluate")
    if gold.min() < 1 or gold.max() > num_ranks:
        raise EvalError("gold rank outside [1, N]")
    pred = np.asarray(predictor(np.atleast_2d(emb_a), np.atleast_2d(emb_b)), dtype=np.int64).ravel()
    confusion = np.zeros((num_ranks, num_ranks), dtype=np.int64)
    np.add.at(confusion, (gold - 1, pred - 1), 1)
    return confusion, float(np.trace(confusion) / gold.size)


# ---------------------------------------------------------------------------
# ordering diagnostics


def ordering_report(emb_a, emb_b, gold, num_ranks: int) -> dict:
    """Per-rank mean cosine and mean Euclidean distance of aligned pairs.

    ``cosine_decreasing`` / ``distance_increasing`` are strict. The report
    also checks, pair by pair, that ``cos = 1 - |a - b|^2 / 2`` (unit vectors).
    Because of that identity the mean *squared* distance ordering always
    matches the cosine ordering; the mean distance ordering usually does but
    not always, since averaging does not commute with the square root.
    """
    a = np.atleast_2d(np.asarray(emb_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(emb_b, dtype=np.float64))
    gold = np.asarray(gold, dtype=np.int64).ravel()
    sims = (a * b).sum(axis=1)
    sqdist = ((a - b) ** 2).sum(axis=1)
    dists = np.sqrt(sqdist)
    mean_cos, mean_dist, mean_sq = [], [], []
    for r in range(1, num_ranks + 1):
        sel = gold == r
        if not sel.any():
            raise EvalError(f"rank {r} has no pairs")
        mean_cos.append(float(sims[sel].mean()))
        mean_dist.append(float(dists[sel].mean()))
        mean_sq.append(float(sqdist[sel].mean()))
    identity_err = float(np.abs(sims - (1.0 - sqdist / 2.0)).max())
    return {
        "mean_cosine": mean_cos,
        "mean_distance": mean_dist,
        "cosine_decreasing": all(x > y for x, y in zip(mean_cos, mean_cos[1:])),
        "distance_increasing": all(x < y for x, y in zip(mean_dist, mean_dist[1:])),
        "mean_squared_distance": mean_sq,
        "squared_distance_increasing": all(x < y for x, y in zip(mean_sq, mean_sq[1:])),
        "identity_max_error": identity_err,
        "identity_holds": identity_err <= 1e-9,
    }


def heldout_pairs(heldout: Sequence[CorpusRecord], num_ranks: int = 4, cross_lingual: bool = True):
    """All held-out record pairs ``(i, j)`` with i < j and their gold ranks."""
    gold = ground_truth_matrix(list(heldout), list(heldout), num_ranks)
    langs = np.array([r.language for r in heldout])
    iu, ju = np.triu_indices(len(heldout), k=1)
    keep = langs[iu] != langs[ju] if cross_lingual else np.ones(iu.size, dtype=bool)
    return iu[keep], ju[keep], gold[iu[keep], ju[keep]]


# ---------------------------------------------------------------------------
# warm-up only vs warm-up + EM, on a synthetic corpus


def _predicted_order(sims: np.ndarray, pred: np.ndarray, num_ranks: int) -> list:
    """Mean cosine per predicted rank, ``None`` for unused ranks."""
    return [float(sims[pred == r].mean()) if (pred == r).any() else None
            for r in range(1, num_ranks + 1)]


def _strictly_decreasing(values: list) -> bool:
    vals = [v for v in values if v is not None]
    return len(vals) >= 2 and all(x > y for x, y in zip(vals, vals[1:]))


def run_ablation(seed: int, spec=None, config=None) -> dict:
    """Train once, measuring held-out retrieval before and after phase 2.

    Returns per-language accuracies for both checkpoints, the long-tail
    averages and the ordering diagnostics of the final model.
    """
    from . import trainer
    from .data import SyntheticCorpusSpec, generate, training_streams

    spec = spec or SyntheticCorpusSpec()
    corpus = generate(spec, seed)
    parallel, mono = training_streams(corpus)
    cfg = config or trainer.TrainConfig.desk(seed=seed, vocab_size=spec.vocab_size,
                                             num_languages=spec.num_languages)
    n = cfg.num_ranks
    state = trainer.train(cfg, parallel, mono, stop_after=cfg.phase1_steps)
    before = crosslingual_retrieval(state.encoder, corpus.heldout)

    i, j, gold = heldout_pairs(corpus.heldout, n)
    emb = enc.encode_batch(state.encoder, [r.sentence for r in corpus.heldout])
    extremes = (gold == 1) | (gold == n)
    _, warm_gmm_acc = rank_accuracy(emb[i[extremes]], emb[j[extremes]], gold[extremes],
                                    gmm_predictor(state.gmm), n)

    state = trainer.train(cfg, parallel, mono, state=state)
    after = crosslingual_retrieval(state.encoder, corpus.heldout)
    emb = enc.encode_batch(state.encoder, [r.sentence for r in corpus.heldout])
    a, b = emb[i], emb[j]
    sims = (a * b).sum(axis=1)
    order = ordering_report(a, b, gold, n)
    by_gmm = _predicted_order(sims, gmm_predictor(state.gmm)(a, b), n)
    by_anchor = _predicted_order(sims, anchor_predictor(state.anchors)(a, b), n)

    tail = [l for l in spec.long_tail_languages if l in after]
    head = [l for l in spec.head_languages if l in after]
    return {
        "seed": seed,
        "retrieval_phase1": before,
        "retrieval_phase2": after,
        "long_tail_phase1": float(np.mean([before[l] for l in tail])),
        "long_tail_phase2": float(np.mean([after[l] for l in tail])),
        "head_phase1": float(np.mean([before[l] for l in head])),
        "head_phase2": float(np.mean([after[l] for l in head])),
        "phase1_gmm_extremes_accuracy": warm_gmm_acc,
        "anchors": [float(s) for s in state.anchors.s],
        "anchors_ordered": all(x > y for x, y in zip(state.anchors.s, state.anchors.s[1:])),
        "gold_rank_mean_cosine": order["mean_cosine"],
        "gold_rank_cosine_decreasing": order["cosine_decreasing"],
        "gmm_label_mean_cosine": by_gmm,
        "gmm_label_cosine_decreasing": _strictly_decreasing(by_gmm),
        "anchor_label_mean_cosine": by_anchor,
        "anchor_label_cosine_decreasing": _strictly_decreasing(by_anchor),
    }
