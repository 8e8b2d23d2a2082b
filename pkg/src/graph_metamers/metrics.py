"""Similarity and consistency scores between a metamer and its reference graph."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError, NumericError


@dataclass
class InvarianceReport:
    s_feat: float | None = None
    s_match: float | None = None
    cs_feat: float | None = None
    s_struct: float | None = None
    cs_struct: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def feature_similarity(X, X_prime, per_node: bool = False) -> float:
    """Cosine similarity of the flattened matrices (or mean per-row cosine)."""
    X = np.asarray(X, dtype=np.float64)
    Xp = np.asarray(X_prime, dtype=np.float64)
    if X.shape != Xp.shape:
        raise DimensionError(f"shapes differ: {X.shape} vs {Xp.shape}")
    if per_node:
        na, nb = np.linalg.norm(X, axis=1), np.linalg.norm(Xp, axis=1)
        if np.any(na == 0) or np.any(nb == 0):
            raise NumericError("cosine similarity undefined for a zero row")
        return float(np.mean(np.sum(X * Xp, axis=1) / (na * nb)))
    na, nb = np.linalg.norm(X), np.linalg.norm(Xp)
    if na == 0 or nb == 0:
        raise NumericError("cosine similarity undefined for a zero matrix")
    return float(np.sum(X * Xp) / (na * nb))


def match_ratio(y, y_prime) -> float:
    y, yp = np.asarray(y), np.asarray(y_prime)
    if y.shape != yp.shape:
        raise DimensionError("prediction vectors differ in length")
    return float(np.mean(y == yp))


def consistency_score(similarity: float, match: float) -> float:
    """``s*m + (1-s)*(1-m)`` with the similarity clamped to [0, 1]."""
    s = min(max(float(similarity), 0.0), 1.0)
    m = float(match)
    return s * m + (1.0 - s) * (1.0 - m)


def _neighbours(adj):
    a = np.asarray(adj)
    return [np.flatnonzero(a[i]) for i in range(len(a))]


def wl_histograms(graphs, iterations: int) -> list[list[Counter]]:
    """Per-graph, per-iteration label counts with a label dictionary shared across graphs."""
    nbrs = [_neighbours(a) for a in graphs]
    labels = [[len(nb) for nb in g] for g in nbrs]
    out = [[Counter(lab)] for lab in labels]
    for _ in range(iterations):
        table: dict = {}
        new_labels = []
        for g_nbrs, lab in zip(nbrs, labels):
            sigs = [(lab[v], tuple(sorted(lab[u] for u in g_nbrs[v]))) for v in range(len(lab))]
            new_labels.append([table.setdefault(s, len(table)) for s in sigs])
        labels = new_labels
        for hist, lab in zip(out, labels):
            hist.append(Counter(lab))
    return out


def _dot(a: Counter, b: Counter) -> int:
    if len(a) > len(b):
        a, b = b, a
    return sum(c * b[k] for k, c in a.items())


def wl_kernel_raw(A, A_prime, iterations: int = 3) -> int:
    ha, hb = wl_histograms([A, A_prime], iterations)
    return sum(_dot(x, y) for x, y in zip(ha, hb))


def wl_kernel(A, A_prime, iterations: int = 3) -> float:
    """Weisfeiler-Lehman subtree kernel, degree-initialised, normalised to [0, 1]."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    ha, hb = wl_histograms([A, A_prime], iterations)
    kab = sum(_dot(x, y) for x, y in zip(ha, hb))
    kaa = sum(_dot(x, x) for x in ha)
    kbb = sum(_dot(y, y) for y in hb)
    if kaa == 0 or kbb == 0:
        return 0.0
    return float(kab / np.sqrt(float(kaa) * float(kbb)))


def feature_report(X, X_prime, y, y_prime, per_node: bool = False) -> InvarianceReport:
    s = feature_similarity(X, X_prime, per_node=per_node)
    m = match_ratio(y, y_prime)
    return InvarianceReport(s_feat=s, s_match=m, cs_feat=consistency_score(s, m))


def structure_report(A, A_prime, y, y_prime, iterations: int = 3) -> InvarianceReport:
    s = wl_kernel(A, A_prime, iterations)
    m = match_ratio(y, y_prime)
    return InvarianceReport(s_struct=s, s_match=m, cs_struct=consistency_score(s, m))
