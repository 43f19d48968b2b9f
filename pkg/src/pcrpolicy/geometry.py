"""Rigid-body algebra, point cloud containers and nearest-neighbor search."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientPointsError, InvalidParameterError

DEFAULT_VOXEL_SIZE = 0.004
_ORTHO_TOL = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def _project_to_so3(r: np.ndarray) -> np.ndarray:
    # Polar decomposition via SVD; nearest proper rotation in Frobenius norm.
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """A proper rigid motion ``x -> rotation @ x + translation``.

    Args:
        rotation: 3x3 orthonormal matrix with determinant +1.
        translation: 3-vector in meters.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise InvalidParameterError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidParameterError("transform contains non-finite entries")
        drift = max(np.max(np.abs(r.T @ r - np.eye(3))), abs(np.linalg.det(r) - 1.0))
        if drift > 1e-6:
            raise InvalidParameterError("rotation is not a proper orthonormal matrix")
        if drift > _ORTHO_TOL:
            r = _project_to_so3(r)
        object.__setattr__(self, "rotation", _readonly(r))
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise InvalidParameterError(f"expected a 4x4 matrix, got {m.shape}")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
            raise InvalidParameterError("bottom row of a homogeneous transform must be (0, 0, 0, 1)")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(so3_exp(np.asarray(rotvec, dtype=np.float64)), translation)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        return inverse(self)

    def apply(self, points) -> np.ndarray:
        """Transform an (N, 3) array of points."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix, other.matrix, rtol=0.0, atol=atol))

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula for the exponential of a rotation vector."""
    theta = float(np.linalg.norm(w))
    k = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if theta < 1e-12:
        return np.eye(3) + k
    return np.eye(3) + np.sin(theta) / theta * k + (1.0 - np.cos(theta)) / theta**2 * (k @ k)


def rotation_about_axis(axis: Sequence[float], angle: float) -> RigidTransform:
    axis = np.asarray(axis, dtype=np.float64)
    return RigidTransform.from_rotvec(axis / np.linalg.norm(axis) * angle)


def rot_z(angle: float) -> RigidTransform:
    return rotation_about_axis((0.0, 0.0, 1.0), angle)


def compose(t1: RigidTransform, t2: RigidTransform) -> RigidTransform:
    """Return ``t1 @ t2``: apply ``t2`` first, then ``t1``."""
    return RigidTransform(t1.rotation @ t2.rotation, t1.rotation @ t2.translation + t1.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Positions in meters, optional RGB colors in [0, 1] and optional unit normals.

    Arrays are copied and frozen on construction, so a cloud is an immutable value.
    """

    points: np.ndarray
    colors: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise InvalidParameterError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", _readonly(pts))
        n = len(pts)
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(c) != n:
                raise InvalidParameterError(f"{len(c)} colors for {n} points")
            if c.size and (c.min() < 0.0 or c.max() > 1.0 or not np.all(np.isfinite(c))):
                raise InvalidParameterError("color channels must lie in [0, 1]")
            object.__setattr__(self, "colors", _readonly(c))
        if self.normals is not None:
            nm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nm) != n:
                raise InvalidParameterError(f"{len(nm)} normals for {n} points")
            if nm.size and np.max(np.abs(np.linalg.norm(nm, axis=1) - 1.0)) > 1e-6:
                raise InvalidParameterError("normals must have unit length")
            object.__setattr__(self, "normals", _readonly(nm))

    def __len__(self):
        return len(self.points)

    @property
    def has_colors(self) -> bool:
        return self.colors is not None

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def select(self, mask_or_index) -> "PointCloud":
        return PointCloud(
            self.points[mask_or_index],
            None if self.colors is None else self.colors[mask_or_index],
            None if self.normals is None else self.normals[mask_or_index],
        )

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self.points, self.colors, normals)

    def without_normals(self) -> "PointCloud":
        return PointCloud(self.points, self.colors, None)

    def with_colors(self, colors) -> "PointCloud":
        return PointCloud(self.points, colors, self.normals)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))


def transform_cloud(t: RigidTransform, p: PointCloud) -> PointCloud:
    normals = None if p.normals is None else p.normals @ t.rotation.T
    return PointCloud(t.apply(p.points), p.colors, normals)


def merge_clouds(p1: PointCloud, p2: PointCloud) -> PointCloud:
    """Concatenate two clouds, ``p1`` first.

    An attribute survives only if both inputs carry it; an empty input does not
    count against the other side.
    """
    if len(p1) == 0:
        return p2
    if len(p2) == 0:
        return p1
    colors = np.vstack([p1.colors, p2.colors]) if p1.has_colors and p2.has_colors else None
    normals = np.vstack([p1.normals, p2.normals]) if p1.has_normals and p2.has_normals else None
    return PointCloud(np.vstack([p1.points, p2.points]), colors, normals)


def voxel_downsample(p: PointCloud, voxel_size: float = DEFAULT_VOXEL_SIZE) -> PointCloud:
    """Replace the points of each occupied voxel by their centroid.

    The grid is anchored at the minimum corner of the bounding box. Output points
    come in ascending lexicographic voxel order; colors and normals are averaged
    per voxel, normals re-normalized.
    """
    if not voxel_size > 0:
        raise InvalidParameterError(f"voxel_size must be positive, got {voxel_size}")
    if len(p) == 0:
        raise InsufficientPointsError("cannot downsample an empty cloud")
    pts = p.points
    idx = np.floor((pts - pts.min(axis=0)) / voxel_size).astype(np.int64)
    _, inverse_idx, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    inverse_idx = inverse_idx.reshape(-1)
    m = len(counts)

    def _mean(a):
        out = np.zeros((m, 3))
        for k in range(3):
            out[:, k] = np.bincount(inverse_idx, weights=a[:, k], minlength=m)
        return out / counts[:, None]

    colors = None if p.colors is None else np.clip(_mean(p.colors), 0.0, 1.0)
    normals = None
    if p.normals is not None:
        summed = _mean(p.normals)
        norm = np.linalg.norm(summed, axis=1)
        # Opposing normals inside one voxel can cancel; keep the first member's normal.
        degenerate = norm < 1e-12
        if np.any(degenerate):
            first = np.full(m, -1)
            order = np.arange(len(pts))[::-1]
            first[inverse_idx[order]] = order
            summed[degenerate] = p.normals[first[degenerate]]
            norm[degenerate] = 1.0
        normals = summed / norm[:, None]
    return PointCloud(_mean(pts), colors, normals)


class SpatialIndex:
    """Read-only k-d tree over the points of a cloud.

    Backed by :class:`scipy.spatial.cKDTree`; results are re-sorted so that ties
    in distance resolve to the lower point id.
    """

    def __init__(self, points):
        pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
        self.points = _readonly(pts.reshape(-1, 3))
        if len(self.points) == 0:
            raise InsufficientPointsError("cannot index an empty cloud")
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def query(self, queries, k: int = 1):
        """Vectorized k-nearest search returning ``(distances, ids)`` of shape (Q, k)."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        k = min(int(k), len(self.points))
        d, i = self._tree.query(q, k=k)
        return d.reshape(len(q), k), i.reshape(len(q), k)

    def query_radius(self, queries, radius: float):
        """Ids within ``radius`` of each query, each list sorted by id."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        return self._tree.query_ball_point(q, r=radius, return_sorted=True)

    def radius_pairs(self, radius: float):
        """All (i, j) index pairs, i != j, whose points lie within ``radius``.

        Returns the pair arrays sorted by (i, j) and the corresponding distances.
        """
        pairs = self._tree.query_pairs(r=radius, output_type="ndarray")
        if len(pairs) == 0:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, np.zeros(0)
        i = np.concatenate([pairs[:, 0], pairs[:, 1]])
        j = np.concatenate([pairs[:, 1], pairs[:, 0]])
        order = np.lexsort((j, i))
        i, j = i[order], j[order]
        d = np.linalg.norm(self.points[i] - self.points[j], axis=1)
        return i, j, d


def nearest_neighbors(index: SpatialIndex, query, k: int) -> list[tuple[int, float]]:
    """The ``k`` closest indexed points to ``query``, ascending, ties by lower id."""
    if k < 1:
        raise InvalidParameterError("k must be at least 1")
    k = min(k, len(index))
    q = np.asarray(query, dtype=np.float64).reshape(3)
    # Over-fetch so equal-distance points just beyond k are visible to the tie-break.
    fetch = min(len(index), k + 8)
    while True:
        d, ids = index.query(q, fetch)
        d, ids = d[0], ids[0]
        if fetch == len(index) or d[-1] > d[k - 1]:
            break
        fetch = min(len(index), fetch * 2)
    # Recompute exactly so ties are judged on identical arithmetic.
    exact = np.linalg.norm(index.points[ids] - q, axis=1)
    order = np.lexsort((ids, exact))[:k]
    return [(int(ids[o]), float(exact[o])) for o in order]


def pca_normals(points: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Smallest-eigenvalue eigenvectors of per-point neighborhood covariances.

    ``(i, j)`` lists neighbor pairs; each point's neighborhood is itself plus every
    ``j`` paired with it.
    """
    n = len(points)
    d = points[j] - points[i]
    cnt = np.bincount(i, minlength=n).astype(np.float64) + 1.0
    s1 = np.zeros((n, 3))
    s2 = np.zeros((n, 3, 3))
    for a in range(3):
        s1[:, a] = np.bincount(i, weights=d[:, a], minlength=n)
        for b in range(a, 3):
            s2[:, a, b] = np.bincount(i, weights=d[:, a] * d[:, b], minlength=n)
            s2[:, b, a] = s2[:, a, b]
    mean = s1 / cnt[:, None]
    cov = s2 / cnt[:, None, None] - mean[:, :, None] * mean[:, None, :]
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def _neighbor_pairs(index: SpatialIndex, radius: float, fallback_k: int = 10):
    i, j, _ = index.radius_pairs(radius)
    n = len(index)
    counts = np.bincount(i, minlength=n) + 1
    sparse = np.flatnonzero(counts < 3)
    if len(sparse):
        _, nn = index.query(index.points[sparse], fallback_k + 1)
        keep = np.isin(i, sparse, invert=True)
        fi = np.repeat(sparse, nn.shape[1])
        fj = nn.reshape(-1)
        self_pair = fi == fj
        i = np.concatenate([i[keep], fi[~self_pair]])
        j = np.concatenate([j[keep], fj[~self_pair]])
    return i, j


def estimate_normals(
    p: PointCloud,
    radius: float,
    viewpoint: Optional[Sequence[float]] = (0.0, 0.0, 1e3),
    index: Optional[SpatialIndex] = None,
) -> PointCloud:
    """PCA normals over radius neighborhoods, flipped to face ``viewpoint``.

    Points with fewer than 3 radius neighbors (self included) fall back to their
    10 nearest neighbors.
    """
    if not radius > 0:
        raise InvalidParameterError(f"radius must be positive, got {radius}")
    if len(p) < 3:
        raise InsufficientPointsError(f"normal estimation needs at least 3 points, got {len(p)}")
    index = index or SpatialIndex(p)
    i, j = _neighbor_pairs(index, radius)
    normals = pca_normals(p.points, i, j)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    if viewpoint is not None:
        flip = np.einsum("ij,ij->i", normals, np.asarray(viewpoint, dtype=np.float64) - p.points) < 0
        normals[flip] *= -1.0
    return p.with_normals(normals)


def orient_normals(p: PointCloud, reference: Optional[np.ndarray] = None) -> PointCloud:
    """Flip normals to agree with ``reference`` normals, or else to point away from the centroid.

    Both rules commute with rigid motion of the cloud, unlike a fixed world viewpoint.
    """
    if p.normals is None:
        raise InvalidParameterError("cloud has no normals to orient")
    n = p.normals.copy()
    if reference is None:
        reference = p.points - p.points.mean(axis=0)
    flip = np.einsum("ij,ij->i", n, reference) < 0
    n[flip] *= -1.0
    return p.with_normals(n)


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, stable near 0 and pi."""
    s = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    c = 0.5 * (np.trace(r) - 1.0)
    return float(np.arctan2(s, c))
