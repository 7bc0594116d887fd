"""Recursive Bayesian fusion of per-pixel class probabilities into surfels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ClassCountMismatch
from .semantics_core import LabelDistribution, normalize_rows

if TYPE_CHECKING:
    from .prediction import ProbabilityMap
    from .surfel_map import IndexMap, SurfelMap


@dataclass
class FusionStats:
    surfels_updated: int = 0
    pixels_used: int = 0


def init_distributions(n: int, label_count: int) -> np.ndarray:
    """Uniform prior for ``n`` freshly created surfels."""
    return np.full((n, label_count), 1.0 / label_count)


def nearest_source_index(src: int, dst: int) -> np.ndarray:
    """Source index for each of ``dst`` output cells under nearest-neighbour resampling."""
    scale = src / dst
    return np.minimum(np.floor((np.arange(dst) + 0.5) * scale).astype(np.int64), src - 1)


def fuse_prediction(smap: "SurfelMap", index_map: "IndexMap", pred: "ProbabilityMap") -> FusionStats:
    """Multiply each visible surfel's distribution by its pixel's prediction row.

    The prediction is looked up by nearest neighbour when its resolution
    differs from the index map's.
    """
    if pred.classes != smap.label_set.count:
        raise ClassCountMismatch(f"prediction has {pred.classes} classes, map has {smap.label_set.count}")
    h, w = index_map.ids.shape
    occ_v, occ_u = np.nonzero(index_map.ids >= 0)
    if occ_v.size == 0:
        return FusionStats()
    sids = index_map.ids[occ_v, occ_u]
    if pred.width == w and pred.height == h:
        lik = pred.probs[occ_v, occ_u]
    else:
        su = nearest_source_index(pred.width, w)
        sv = nearest_source_index(pred.height, h)
        lik = pred.probs[sv[occ_v], su[occ_u]]

    table = smap.table
    rows = table.rows(sids)
    # the z-buffer gives each surfel at most one pixel
    assert np.unique(rows).size == rows.size, "surfel visible at two pixels"
    table.probs[rows] = normalize_rows(table.probs[rows] * lik)
    return FusionStats(surfels_updated=int(rows.size), pixels_used=int(rows.size))


def fuse_step(prior: np.ndarray, likelihood: np.ndarray) -> np.ndarray:
    """One Bayesian update on a single distribution (same arithmetic as the map path)."""
    return normalize_rows(np.asarray(prior, float)[None, :] * np.asarray(likelihood, float)[None, :])[0]


def batch_posterior(prior, likelihoods: Sequence) -> LabelDistribution:
    """Posterior after all likelihoods, accumulated in extended-precision log space.

    No floor is applied; this is the reference the sequential path is
    checked against.
    """
    p = np.asarray(prior.probs if isinstance(prior, LabelDistribution) else prior, dtype=np.longdouble)
    logp = np.log(p)
    for lik in likelihoods:
        arr = np.asarray(lik.probs if isinstance(lik, LabelDistribution) else lik, dtype=np.longdouble)
        if arr.shape != p.shape:
            raise ClassCountMismatch(f"likelihood has {arr.size} classes, prior has {p.size}")
        with np.errstate(divide="ignore"):
            logp = logp + np.log(arr)
    m = np.max(logp)
    if not np.isfinite(m):
        return LabelDistribution(np.full(p.size, 1.0 / p.size))
    e = np.exp(logp - m)
    return LabelDistribution((e / e.sum()).astype(np.float64))
