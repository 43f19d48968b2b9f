"""FPFH descriptors and feature-space correspondence matching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientPointsError, InvalidParameterError, PreconditionError
from .geometry import PointCloud, SpatialIndex

N_BINS = 11
N_FEATURES = 3 * N_BINS


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """One 33-bin FPFH histogram per point, plus the radius used to build it."""

    descriptors: np.ndarray
    radius: float

    def __len__(self):
        return len(self.descriptors)


def pair_features(p_s, n_s, p_t, n_t):
    """Darboux-frame angular features for arrays of point pairs.

    The pair is reordered per row so the source is the end whose normal makes the
    smaller angle with the connecting line, which makes the triple independent of
    argument order.

    Returns:
        ``(f1, f2, f3)``: the in-plane angle in [-pi, pi], and two cosines in [-1, 1].
    """
    dp = p_t - p_s
    dist = np.linalg.norm(dp, axis=1)
    safe = np.where(dist > 0, dist, 1.0)
    a1 = np.einsum("ij,ij->i", n_s, dp) / safe
    a2 = np.einsum("ij,ij->i", n_t, dp) / safe
    swap = np.arccos(np.clip(np.abs(a1), 0, 1)) > np.arccos(np.clip(np.abs(a2), 0, 1))
    n1 = np.where(swap[:, None], n_t, n_s)
    n2 = np.where(swap[:, None], n_s, n_t)
    dp = np.where(swap[:, None], -dp, dp)
    f3 = np.where(swap, -a2, a1)

    v = np.cross(dp, n1)
    vn = np.linalg.norm(v, axis=1)
    ok = (vn > 0) & (dist > 0)
    v = v / np.where(vn > 0, vn, 1.0)[:, None]
    w = np.cross(n1, v)
    f2 = np.einsum("ij,ij->i", v, n2)
    f1 = np.arctan2(np.einsum("ij,ij->i", w, n2), np.einsum("ij,ij->i", n1, n2))
    zero = ~ok
    f1[zero] = 0.0
    f2[zero] = 0.0
    f3[zero] = 0.0
    return f1, f2, f3


def _bins(f1, f2, f3):
    b1 = np.floor(N_BINS * (f1 + np.pi) / (2.0 * np.pi)).astype(np.int64)
    b2 = np.floor(N_BINS * (f2 + 1.0) * 0.5).astype(np.int64)
    b3 = np.floor(N_BINS * (f3 + 1.0) * 0.5).astype(np.int64)
    return (
        np.clip(b1, 0, N_BINS - 1),
        np.clip(b2, 0, N_BINS - 1) + N_BINS,
        np.clip(b3, 0, N_BINS - 1) + 2 * N_BINS,
    )


def compute_fpfh(p: PointCloud, radius: float, index: Optional[SpatialIndex] = None) -> FeatureSet:
    """Fast Point Feature Histograms over radius neighborhoods.

    Each point first gets a simplified histogram (SPFH) of the three angular
    features to its neighbors, each block summing to 100. The final descriptor adds
    to a point's own SPFH the neighbors' SPFHs weighted by inverse distance, with
    each 11-bin block of that weighted sum rescaled to 100.
    Points without neighbors get an all-zero descriptor.
    """
    if p.normals is None:
        raise PreconditionError("FPFH requires normals")
    if not radius > 0:
        raise InvalidParameterError(f"radius must be positive, got {radius}")
    n = len(p)
    if n < 5:
        raise InsufficientPointsError(f"FPFH needs at least 5 points, got {n}")
    index = index or SpatialIndex(p)
    i, j, d = index.radius_pairs(radius)
    keep = d > 0
    i, j, d = i[keep], j[keep], d[keep]
    pts, nrm = p.points, p.normals

    counts = np.bincount(i, minlength=n).astype(np.float64)
    spfh = np.zeros((n, N_FEATURES))
    if len(i):
        incr = 100.0 / counts[i]
        for b in _bins(*pair_features(pts[i], nrm[i], pts[j], nrm[j])):
            spfh += np.bincount(i * N_FEATURES + b, weights=incr, minlength=n * N_FEATURES).reshape(n, N_FEATURES)

    weighted = np.zeros((n, N_FEATURES))
    if len(i):
        wgt = 1.0 / d
        np.add.at(weighted, i, spfh[j] * wgt[:, None])
    fpfh = spfh.copy()
    for blk in range(3):
        sl = slice(blk * N_BINS, (blk + 1) * N_BINS)
        total = weighted[:, sl].sum(axis=1)
        scale = np.where(total > 0, 100.0 / np.where(total > 0, total, 1.0), 0.0)
        fpfh[:, sl] += weighted[:, sl] * scale[:, None]
    return FeatureSet(fpfh, float(radius))


def match_features(src: FeatureSet, dst: FeatureSet, mutual: bool = True) -> np.ndarray:
    """Nearest destination descriptor (L2) for every source descriptor.

    Returns:
        (K, 2) int array of ``(src id, dst id)`` pairs ordered by src id. With
        ``mutual`` only pairs that are each other's nearest neighbor survive.
    """
    if len(src) == 0 or len(dst) == 0:
        raise InsufficientPointsError("cannot match empty feature sets")
    fwd = _nearest(dst.descriptors, src.descriptors)
    pairs = np.column_stack([np.arange(len(src)), fwd])
    if mutual:
        back = _nearest(src.descriptors, dst.descriptors)
        pairs = pairs[back[fwd] == pairs[:, 0]]
    return pairs


def _nearest(base: np.ndarray, queries: np.ndarray) -> np.ndarray:
    # Ties (duplicate descriptors) resolve to the lowest base id.
    tree = cKDTree(base)
    d, idx = tree.query(queries, k=1)
    dup = d == 0
    if np.any(dup):
        _, first = np.unique(base, axis=0, return_index=True)
        lookup = {base[f].tobytes(): f for f in first}
        idx = idx.copy()
        for q in np.flatnonzero(dup):
            idx[q] = lookup.get(queries[q].tobytes(), idx[q])
    return idx
