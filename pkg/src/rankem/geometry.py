"""Geometry of an embedding space: invariance across languages (mean
symmetric Gaussian KL), canonical form (between/within cluster scatter ratio)
and isotropy (principal ratio of the exponential partition function)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .numerics import NumericsError, sym_eig


class GeometryError(ValueError):
    pass


@dataclass
class LanguageGaussian:
    mean: np.ndarray
    covariance: np.ndarray


@dataclass
class GeometryReport:
    invariance: float
    canonical: float
    isotropy: float

    def to_json(self) -> dict:
        # an undefined canonical score (too few clusters, zero spread) is written as null
        canon = None if math.isnan(self.canonical) else self.canonical
        return {"invariance": self.invariance, "canonical": canon, "isotropy": self.isotropy}


def fit_language_gaussian(embeddings, ridge: float = 1e-4, diagonal: bool = False) -> LanguageGaussian:
    """Sample mean and (M-1)-normalised sample covariance plus ``ridge * I``."""
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if x.shape[0] < 2:
        raise GeometryError("need at least 2 embeddings to fit a Gaussian")
    if ridge < 0:
        raise GeometryError("ridge must be non-negative")
    mean = x.mean(axis=0)
    centred = x - mean
    cov = centred.T @ centred / (x.shape[0] - 1)
    if diagonal:
        cov = np.diag(np.diag(cov))
    return LanguageGaussian(mean, cov + ridge * np.eye(x.shape[1]))


def _cholesky(cov: np.ndarray, name: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise GeometryError(f"covariance of {name} is not positive definite") from exc


def gaussian_kl(a: LanguageGaussian, b: LanguageGaussian) -> float:
    """Closed-form KL(a || b) between multivariate normals."""
    if a.mean.shape != b.mean.shape:
        raise GeometryError("dimension mismatch")
    la = _cholesky(a.covariance, "a")
    lb = _cholesky(b.covariance, "b")
    d = a.mean.shape[0]
    # tr(Sb^-1 Sa) = |Lb^-1 La|_F^2
    m = np.linalg.solve(lb, la)
    trace = float((m * m).sum())
    z = np.linalg.solve(lb, b.mean - a.mean)
    maha = float(z @ z)
    logdet = 2.0 * float(np.log(np.diag(lb)).sum() - np.log(np.diag(la)).sum())
    return max(0.5 * (trace + maha - d + logdet), 0.0)


def invariance_score(per_language: Sequence, ridge: float = 1e-4, diagonal: bool = False) -> float:
    """Mean over language pairs of the averaged two-way KL divergence."""
    if len(per_language) < 2:
        raise GeometryError("need at least two languages")
    fits = [fit_language_gaussian(x, ridge, diagonal) for x in per_language]
    sym = [0.5 * (gaussian_kl(fits[i], fits[j]) + gaussian_kl(fits[j], fits[i]))
           for i, j in combinations(range(len(fits)), 2)]
    return float(np.mean(sym))


def canonical_score(clusters: Sequence) -> float:
    """``m * sum_k |c_k - c|^2 / sum_k sum_{s in k} |s - c_k|^2`` for clusters
    of equal size m. No (n-K)/(K-1) factor."""
    arrs = [np.atleast_2d(np.asarray(c, dtype=np.float64)) for c in clusters]
    if len(arrs) < 2:
        raise GeometryError("need at least two clusters")
    m = arrs[0].shape[0]
    if m < 1 or any(c.shape != arrs[0].shape for c in arrs):
        raise GeometryError("clusters must be non-empty and of equal size")
    centroids = np.array([c.mean(axis=0) for c in arrs])
    overall = np.vstack(arrs).mean(axis=0)
    between = m * float(((centroids - overall) ** 2).sum())
    within = float(sum(((c - c.mean(axis=0)) ** 2).sum() for c in arrs))
    if within <= 0.0:
        raise GeometryError("degenerate within-cluster variance")
    return between / within


def isotropy_score(embeddings, rel_cutoff: float = 1e-10) -> float:
    """``min_v Z(v) / max_v Z(v)`` with ``Z(v) = sum_e exp(v . e)`` over the
    principal axes v of ``E^T E`` whose eigenvalue exceeds
    ``rel_cutoff * lambda_max``."""
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if not np.any(e):
        raise GeometryError("embedding matrix is all zeros")
    try:
        vals, vecs = sym_eig(e.T @ e)
    except NumericsError as exc:
        raise GeometryError(str(exc)) from exc
    keep = vals > rel_cutoff * vals[0]
    z = np.exp(e @ vecs[:, keep]).sum(axis=0)
    return float(z.min() / z.max())


def geometry_report(embeddings, languages, items, ridge: float = 1e-4) -> GeometryReport:
    """All three measurements for a labelled embedding dump.

    Languages define the invariance sets; item ids define the clusters. Only
    items present in every language are clustered so cluster sizes match.
    """
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    languages = np.asarray(languages)
    items = np.asarray(items)
    langs = sorted(set(languages.tolist()))
    inv = invariance_score([e[languages == l] for l in langs], ridge)
    full = [i for i in sorted(set(items.tolist()))
            if set(languages[items == i].tolist()) == set(langs)]
    clusters = []
    for i in full:
        rows = [np.nonzero((items == i) & (languages == l))[0][0] for l in langs]
        clusters.append(e[rows])
    canon = math.nan
    if len(clusters) >= 2:
        try:
            canon = canonical_score(clusters)
        except GeometryError:
            pass  # translations embedded identically: the ratio has no finite value
    return GeometryReport(invariance=inv, canonical=canon, isotropy=isotropy_score(e))


# ---------------------------------------------------------------------------
# TSV embedding dump: header "d=<int>", rows "lang<TAB>item<TAB>v1,...,vd"


def write_embedding_dump(path, embeddings, languages, items) -> None:
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"d={e.shape[1]}\n")
        for row, lang, item in zip(e, languages, items):
            fh.write(f"{int(lang)}\t{int(item)}\t{','.join(repr(float(v)) for v in row)}\n")


def read_embedding_dump(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("d="):
            raise GeometryError(f"{path}: line 1: expected header 'd=<int>'")
        try:
            d = int(header[2:])
        except ValueError as exc:
            raise GeometryError(f"{path}: line 1: bad dimension") from exc
        rows, langs, items = [], [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            try:
                if len(parts) != 3:
                    raise ValueError("expected 3 tab-separated fields")
                vec = [float(v) for v in parts[2].split(",")]
                if len(vec) != d:
                    raise ValueError(f"expected {d} values, got {len(vec)}")
                langs.append(int(parts[0]))
                items.append(int(parts[1]))
                rows.append(vec)
            except ValueError as exc:
                raise GeometryError(f"{path}: line {lineno}: {exc}") from exc
    return np.array(rows).reshape(-1, d), np.array(langs, dtype=np.int64), np.array(items, dtype=np.int64)
