"""Image scoring and budgeted selection for pool-based active learning.

Raw per-object uncertainties of each type are z-scored over the whole
unlabeled pool, reduced to one value per image by a max over objects, and
combined across the four types by an :class:`AggregationMode`.  Images with
no surviving detection rank below every scored image.
"""
from __future__ import annotations

import csv
import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .uncertainty import TYPES

_T = {name: i for i, name in enumerate(TYPES)}


class AggregationMode(enum.Enum):
    AL_B = ("single", ("al_b",))
    EP_B = ("single", ("ep_b",))
    AL_C = ("single", ("al_c",))
    EP_C = ("single", ("ep_c",))
    SUM_B = ("sum", ("al_b", "ep_b"))
    SUM_C = ("sum", ("al_c", "ep_c"))
    SUM_AL = ("sum", ("al_b", "al_c"))
    SUM_EP = ("sum", ("ep_b", "ep_c"))
    SUM_ALL = ("sum", TYPES)
    MAX_B = ("max", ("al_b", "ep_b"))
    MAX_C = ("max", ("al_c", "ep_c"))
    MAX_AL = ("max", ("al_b", "al_c"))
    MAX_EP = ("max", ("ep_b", "ep_c"))
    MAX_ALL = ("max", TYPES)

    @property
    def op(self) -> str:
        return self.value[0]

    @property
    def types(self) -> tuple:
        return self.value[1]

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "AggregationMode":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown aggregation mode {text!r}; choose from "
                             f"{', '.join(m.label for m in cls)}") from None


def zscore_normalize(values):
    """(normalized, mean, population std); a constant input maps to zeros with a warning."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v.copy(), 0.0, 0.0
    m, s = float(v.mean()), float(v.std())
    if not s > 0:
        warnings.warn("zero spread in pool uncertainties; normalized scores set to 0", RuntimeWarning)
        return np.zeros_like(v), m, s
    return (v - m) / s, m, s


def image_score(values) -> float:
    """Max over an image's objects; NaN marks an image with no detections."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.max()) if v.size else float("nan")


def aggregate(scores, mode: AggregationMode):
    """Combine per-image scores ordered as (al_b, ep_b, al_c, ep_c); works on (..., 4)."""
    s = np.asarray(scores, dtype=np.float64)
    cols = s[..., [_T[t] for t in mode.types]]
    if mode.op == "max":
        return cols.max(axis=-1)
    return cols.sum(axis=-1)


@dataclass
class PoolScores:
    ids: np.ndarray
    per_type: np.ndarray  # (n, 4) normalized image scores; NaN when no detection
    final: np.ndarray  # (n,)
    has_detection: np.ndarray
    stats: np.ndarray  # (4, 2): pool mean and std per type

    def write_csv(self, path, selected=()) -> None:
        chosen = set(int(i) for i in selected)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("image_id",) + tuple(f"z_{t}" for t in TYPES) + ("aggregate", "selected"))
            for i, image_id in enumerate(self.ids):
                row = ["" if not self.has_detection[i] else repr(float(x)) for x in self.per_type[i]]
                agg = "" if not self.has_detection[i] else repr(float(self.final[i]))
                w.writerow([int(image_id)] + row + [agg, int(int(image_id) in chosen)])


def score_pool(ids, per_image_quads, mode: AggregationMode) -> PoolScores:
    """Score every pool image from its detections' raw uncertainty quads.

    ``per_image_quads[i]`` is an (m_i, 4) array (m_i may be 0).
    """
    ids = np.asarray(ids)
    quads = [np.asarray(q, dtype=np.float64).reshape(-1, 4) for q in per_image_quads]
    counts = np.array([len(q) for q in quads])
    flat = np.concatenate(quads) if len(quads) else np.zeros((0, 4))
    per_type = np.full((len(ids), 4), np.nan)
    stats = np.zeros((4, 2))
    owners = np.repeat(np.arange(len(ids)), counts)
    for t in range(4):
        z, m, s = zscore_normalize(flat[:, t])
        stats[t] = (m, s)
        if len(z):
            best = np.full(len(ids), -np.inf)
            np.maximum.at(best, owners, z)
            per_type[:, t] = np.where(counts > 0, best, np.nan)
    has = counts > 0
    final = np.where(has, aggregate(np.nan_to_num(per_type), mode), np.nan)
    return PoolScores(ids, per_type, final, has, stats)


def select_top_k(ids, scores, budget: int, has_detection=None) -> list:
    """Ids of the ``budget`` highest scores; unscored (NaN / no-detection) images last, ties by id."""
    ids = np.asarray(ids)
    if not len(ids):
        raise ValueError("cannot select from an empty pool")
    if budget > len(ids) or budget < 0:
        raise ValueError(f"budget {budget} exceeds pool of {len(ids)}")
    s = np.asarray(scores, dtype=np.float64)
    unscored = np.isnan(s) if has_detection is None else ~np.asarray(has_detection, bool) | np.isnan(s)
    key = np.where(unscored, 0.0, -s)
    order = np.lexsort((ids, key, unscored))
    return [int(i) for i in ids[order[:budget]]]


def entropy_score(detections) -> float:
    """Mean Shannon entropy of the per-detection class distributions; NaN without detections."""
    if not detections:
        return float("nan")
    ents = []
    for d in detections:
        p = np.asarray(d.class_probs if hasattr(d, "class_probs") else d, dtype=np.float64)
        nz = p[p > 0]
        ents.append(float(-(nz * np.log(nz)).sum()))
    return float(np.mean(ents))


def coreset_greedy(pool_features, labeled_features, budget: int) -> list:
    """k-center greedy: indices into ``pool_features``, picked farthest-first.

    With no labeled points the first pick is pool index 0.
    """
    X = np.asarray(pool_features, dtype=np.float64)
    L = np.asarray(labeled_features, dtype=np.float64).reshape(-1, X.shape[1] if X.ndim == 2 else 0)
    n = len(X)
    if budget > n:
        raise ValueError(f"budget {budget} exceeds pool of {n}")
    if budget <= 0:
        return []
    if len(L):
        d2 = ((X[:, None, :] - L[None]) ** 2).sum(-1).min(axis=1) if len(L) * n <= 4_000_000 else \
            np.min([((X - l) ** 2).sum(-1) for l in L], axis=0)
    else:
        d2 = np.full(n, np.inf)
    chosen = []
    for _ in range(budget):
        if np.isinf(d2).all():
            j = 0 if not chosen else int(np.flatnonzero(~np.isin(np.arange(n), chosen))[0])
        else:
            j = int(np.argmax(np.where(np.isin(np.arange(n), chosen), -1.0, d2)))
        chosen.append(j)
        d2 = np.minimum(d2, ((X - X[j]) ** 2).sum(-1))
    return chosen


def random_score(pool_ids, seed: int, budget: int) -> list:
    """Uniform draw without replacement; sorted ids."""
    ids = np.asarray(pool_ids)
    if budget > len(ids):
        raise ValueError(f"budget {budget} exceeds pool of {len(ids)}")
    pick = np.random.default_rng(seed).choice(len(ids), size=budget, replace=False)
    return sorted(int(i) for i in ids[pick])


def overlap_ratio(a, b) -> float:
    a, b = set(a), set(b)
    if len(a) != len(b):
        raise ValueError(f"selections differ in size ({len(a)} vs {len(b)})")
    if not a:
        return 100.0
    return 100.0 * len(a & b) / len(a)


def overlap_matrix(selections: dict) -> tuple[list, np.ndarray]:
    names = list(selections)
    M = np.array([[overlap_ratio(selections[r], selections[c]) for c in names] for r in names])
    return names, M
