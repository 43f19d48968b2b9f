"""Global registration (feature RANSAC), colored ICP refinement and fitness scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    DegenerateCorrespondencesError,
    InsufficientPointsError,
    InvalidParameterError,
    PreconditionError,
)
from .features import FeatureSet, compute_fpfh, match_features
from .geometry import (
    DEFAULT_VOXEL_SIZE,
    PointCloud,
    RigidTransform,
    SpatialIndex,
    _neighbor_pairs,
    estimate_normals,
    orient_normals,
    so3_exp,
    voxel_downsample,
)


@dataclass(frozen=True)
class RegistrationParams:
    """Knobs of the registration pipeline.

    Lengths left as ``None`` are derived from ``voxel_size``: correspondence and
    RANSAC inlier distance 1.5x, fitness inlier radius 1x, normal radius 2x and
    normal radius 3x and descriptor radius 5x. ``refine_levels`` lists finer
    voxel sizes, as fractions of ``voxel_size``, at which colored ICP is re-run
    after the base level.

    ``color_feature_weight`` appends the point colors, scaled by this weight, to
    the 33 FPFH bins before matching when both clouds carry colors; 0 matches on
    geometry alone.

    ``viewpoint`` is where the sensor sat for clouds that arrive without normals:
    their estimated normals are flipped to face it. ``None`` flips them away from
    the cloud's centroid instead, which suits complete multi-view observations.
    """

    voxel_size: float = DEFAULT_VOXEL_SIZE
    ransac_max_iterations: int = 100_000
    ransac_confidence: float = 0.999
    distance_threshold: Optional[float] = None
    icp_max_iterations: int = 50
    lambda_geometric: float = 0.968
    n_runs: int = 8
    rng_seed: int = 0
    fitness_max_dist: Optional[float] = None
    normal_radius: Optional[float] = None
    feature_radius: Optional[float] = None
    mutual_filter: bool = True
    edge_length_ratio: float = 0.9
    refine_levels: tuple = (0.25,)
    viewpoint: Optional[tuple] = None
    color_feature_weight: float = 400.0

    def __post_init__(self):
        for name in ("voxel_size", "distance_threshold", "fitness_max_dist", "normal_radius", "feature_radius"):
            v = getattr(self, name)
            if v is not None and not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v)):
                raise InvalidParameterError(f"{name} must be a positive length, got {v!r}")
        for name in ("ransac_max_iterations", "icp_max_iterations", "n_runs"):
            v = getattr(self, name)
            if not (isinstance(v, (int, np.integer)) and v >= 1):
                raise InvalidParameterError(f"{name} must be a count >= 1, got {v!r}")
        if not 0.0 < self.ransac_confidence < 1.0:
            raise InvalidParameterError(f"ransac_confidence must lie in (0, 1), got {self.ransac_confidence}")
        if not 0.0 < self.lambda_geometric <= 1.0:
            raise InvalidParameterError(f"lambda_geometric must lie in (0, 1], got {self.lambda_geometric}")
        if not 0.0 < self.edge_length_ratio <= 1.0:
            raise InvalidParameterError("edge_length_ratio must lie in (0, 1]")
        if not isinstance(self.rng_seed, (int, np.integer)):
            raise InvalidParameterError("rng_seed must be an integer")
        if any(not 0.0 < f < 1.0 for f in self.refine_levels):
            raise InvalidParameterError("refine_levels are voxel-size fractions in (0, 1)")
        if not (self.color_feature_weight >= 0 and math.isfinite(self.color_feature_weight)):
            raise InvalidParameterError("color_feature_weight must be finite and >= 0")
        if self.viewpoint is not None:
            vp = np.asarray(self.viewpoint, dtype=np.float64)
            if vp.shape != (3,) or not np.all(np.isfinite(vp)):
                raise InvalidParameterError(f"viewpoint must be a finite 3-vector, got {self.viewpoint!r}")
            object.__setattr__(self, "viewpoint", tuple(float(v) for v in vp))

    @property
    def inlier_distance(self) -> float:
        return self.distance_threshold or 1.5 * self.voxel_size

    @property
    def fitness_distance(self) -> float:
        return self.fitness_max_dist or self.voxel_size

    @property
    def normal_search_radius(self) -> float:
        return self.normal_radius or 3.0 * self.voxel_size

    @property
    def feature_search_radius(self) -> float:
        return self.feature_radius or 5.0 * self.voxel_size


@dataclass(frozen=True)
class RunRecord:
    """Diagnostics of one seeded pipeline pass."""

    seed: int
    fitness: float
    inlier_rmse: float
    iterations: int


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    """Transform mapping the source into the target frame, with quality diagnostics.

    ``objective_history`` holds the colored-ICP objective after every accepted
    iteration (the first entry is the initial value); ``runs`` lists every seeded
    pass of :func:`register`.
    """

    transform: RigidTransform
    fitness: float
    inlier_rmse: float
    iterations_used: int = 0
    objective_history: tuple = ()
    runs: tuple = ()
    seed: Optional[int] = None

    @classmethod
    def failure(cls, transform: Optional[RigidTransform] = None, iterations: int = 0, seed=None):
        return cls(transform or RigidTransform.identity(), 0.0, 0.0, iterations, seed=seed)


# --- least squares -----------------------------------------------------------


def _kabsch(src: np.ndarray, dst: np.ndarray):
    """Batched least-squares rotation/translation for (B, N, 3) arrays."""
    cs = src.mean(axis=-2, keepdims=True)
    cd = dst.mean(axis=-2, keepdims=True)
    h = np.swapaxes(src - cs, -1, -2) @ (dst - cd)
    u, s, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(np.swapaxes(vt, -1, -2) @ np.swapaxes(u, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    corr = np.ones(h.shape[:-2] + (3,))
    corr[..., 2] = d
    r = np.swapaxes(vt, -1, -2) @ (corr[..., :, None] * np.swapaxes(u, -1, -2))
    t = cd[..., 0, :] - np.einsum("...ij,...j->...i", r, cs[..., 0, :])
    return r, t, s


def estimate_transform_svd(source, target) -> RigidTransform:
    """Rigid transform minimizing ``sum |R s + t - d|^2`` over paired points.

    Args:
        source: (N, 3) points, or a sequence of ``(s, d)`` pairs when ``target`` is None.
        target: (N, 3) points paired row-wise with ``source``.

    Raises:
        DegenerateCorrespondencesError: fewer than 3 pairs, or all points collinear.
    """
    if target is None:
        pairs = np.asarray(source, dtype=np.float64)
        source, target = pairs[:, 0], pairs[:, 1]
    s = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(s) != len(d):
        raise InvalidParameterError("source and target must have the same number of points")
    if len(s) < 3:
        raise DegenerateCorrespondencesError(f"need at least 3 correspondences, got {len(s)}")
    r, t, sv = _kabsch(s, d)
    scale = max(sv[0], np.finfo(float).tiny)
    if sv[1] <= 1e-12 * scale or sv[0] <= 1e-300:
        raise DegenerateCorrespondencesError("correspondences are collinear or coincident")
    return RigidTransform(r, t)


# --- scoring -----------------------------------------------------------------


def fitness_score(source: PointCloud, target, t: RigidTransform, max_dist: float, index=None):
    """Fraction of source points whose nearest target point after ``t`` lies within ``max_dist``.

    Returns:
        ``(fitness, inlier_rmse)``; the RMSE is over inlier distances only (0 if none).
    """
    if not max_dist > 0:
        raise InvalidParameterError(f"max_dist must be positive, got {max_dist}")
    if len(source) == 0:
        raise InsufficientPointsError("fitness is undefined for an empty source")
    index = index if index is not None else SpatialIndex(target)
    d, _ = index.query(t.apply(source.points), 1)
    d = d[:, 0]
    inl = d <= max_dist
    n_in = int(inl.sum())
    rmse = float(np.sqrt(np.mean(d[inl] ** 2))) if n_in else 0.0
    return n_in / len(source), rmse


# --- RANSAC ------------------------------------------------------------------

_BATCH = 256


def ransac_register(
    source: PointCloud,
    target: PointCloud,
    src_feat: FeatureSet,
    dst_feat: FeatureSet,
    params: RegistrationParams,
    seed: int,
    correspondences: Optional[np.ndarray] = None,
    target_index: Optional[SpatialIndex] = None,
) -> RegistrationResult:
    """Coarse alignment from feature correspondences.

    Draws minimal samples of 3 correspondences, rejects hypotheses failing the
    edge-length and distance checks, and keeps the one with the most
    correspondence inliers. Sampling stops early once the probability of having
    drawn an all-inlier sample exceeds ``params.ransac_confidence``. A failed
    search returns the identity with fitness 0.
    """
    if len(source) < 3 or len(target) < 3:
        raise InsufficientPointsError("RANSAC needs at least 3 points in each cloud")
    if len(src_feat) != len(source) or len(dst_feat) != len(target):
        raise PreconditionError("features were not computed on these clouds")
    corres = correspondences if correspondences is not None else match_features(src_feat, dst_feat, params.mutual_filter)
    if len(corres) < 3:
        return RegistrationResult.failure(seed=seed)

    S = source.points[corres[:, 0]]
    D = target.points[corres[:, 1]]
    k = len(corres)
    thr = params.inlier_distance
    thr2 = thr * thr
    ratio = params.edge_length_ratio
    rng = np.random.default_rng(seed)

    best_count, best_r, best_t = 0, None, None
    it, limit = 0, params.ransac_max_iterations
    log_fail = math.log(1.0 - params.ransac_confidence)
    edges = ((0, 1), (0, 2), (1, 2))
    while it < limit:
        b = min(_BATCH, limit - it)
        idx = rng.integers(0, k, size=(b, 3))
        it += b
        ok = (idx[:, 0] != idx[:, 1]) & (idx[:, 0] != idx[:, 2]) & (idx[:, 1] != idx[:, 2])
        s, d = S[idx], D[idx]
        for a, c in edges:
            ls = np.linalg.norm(s[:, a] - s[:, c], axis=1)
            ld = np.linalg.norm(d[:, a] - d[:, c], axis=1)
            ok &= (ls >= ratio * ld) & (ld >= ratio * ls)
        if not np.any(ok):
            continue
        s, d = s[ok], d[ok]
        r, t, _ = _kabsch(s, d)
        res = np.einsum("bij,bnj->bni", r, s) + t[:, None, :] - d
        ok2 = np.all(np.einsum("bni,bni->bn", res, res) <= thr2, axis=1)
        if not np.any(ok2):
            continue
        r, t = r[ok2], t[ok2]
        moved = np.einsum("bij,nj->bni", r, S) + t[:, None, :] - D
        counts = np.count_nonzero(np.einsum("bni,bni->bn", moved, moved) <= thr2, axis=1)
        j = int(np.argmax(counts))
        if counts[j] > best_count:
            best_count, best_r, best_t = int(counts[j]), r[j], t[j]
            w = best_count / k
            p_good = w**3
            if p_good >= 1.0:
                limit = min(limit, it)
            elif p_good > 0.0:
                limit = min(limit, max(it, math.ceil(log_fail / math.log1p(-p_good))))

    if best_r is None:
        return RegistrationResult.failure(iterations=it, seed=seed)
    hyp = RigidTransform(best_r, best_t)
    moved = hyp.apply(S) - D
    inl = np.einsum("ni,ni->n", moved, moved) <= thr2
    try:
        hyp = estimate_transform_svd(S[inl], D[inl])
    except DegenerateCorrespondencesError:
        pass
    fit, rmse = fitness_score(source, target, hyp, thr, target_index)
    return RegistrationResult(hyp, fit, rmse, it, seed=seed)


# --- colored ICP -------------------------------------------------------------


def intensity(colors: np.ndarray) -> np.ndarray:
    return colors.mean(axis=1)


def color_gradients(target: PointCloud, radius: float, index: Optional[SpatialIndex] = None) -> np.ndarray:
    """Per-point intensity gradient in each point's tangent plane.

    Neighbors are projected onto the tangent plane and the gradient is the least
    squares fit of intensity differences, with an extra heavily weighted row that
    pins the gradient's normal component to zero.
    """
    if target.normals is None or target.colors is None:
        raise PreconditionError("color gradients require normals and colors")
    index = index or SpatialIndex(target)
    n = len(target)
    i, j = _neighbor_pairs(index, radius)
    p, nrm, c = target.points, target.normals, intensity(target.colors)
    diff = p[j] - p[i]
    proj = diff - nrm[i] * np.einsum("ij,ij->i", nrm[i], diff)[:, None]
    dc = c[j] - c[i]
    ata = np.zeros((n, 3, 3))
    atb = np.zeros((n, 3))
    for a in range(3):
        atb[:, a] = np.bincount(i, weights=proj[:, a] * dc, minlength=n)
        for b in range(a, 3):
            ata[:, a, b] = np.bincount(i, weights=proj[:, a] * proj[:, b], minlength=n)
            ata[:, b, a] = ata[:, a, b]
    w = np.bincount(i, minlength=n).astype(np.float64)
    ata += (w**2)[:, None, None] * nrm[:, :, None] * nrm[:, None, :]
    ata += 1e-12 * np.eye(3)
    grad = np.linalg.solve(ata, atb[:, :, None])[:, :, 0]
    grad[w == 0] = 0.0
    return grad


class _IcpProblem:
    """Residuals and Jacobians of the joint geometric/photometric objective."""

    def __init__(self, source, target, params, target_index, gradients):
        self.src = source.points
        self.tgt = target.points
        self.nrm = target.normals
        self.index = target_index
        self.thr = params.inlier_distance
        self.use_color = source.colors is not None and target.colors is not None and params.lambda_geometric < 1.0
        self.lam = params.lambda_geometric if self.use_color else 1.0
        if self.use_color:
            self.c_src = intensity(source.colors)
            self.c_tgt = intensity(target.colors)
            self.grad = gradients
        # Truncated quadratic: a point costs at most what a geometric inlier at the
        # threshold costs, whether it is unmatched or its colors disagree.
        self.cap = self.lam * self.thr**2

    def evaluate(self, t: RigidTransform):
        vs = t.apply(self.src)
        d, idx = self.index.query(vs, 1)
        d, idx = d[:, 0], idx[:, 0]
        m = d <= self.thr
        vs, q = vs[m], idx[m]
        vt, nt = self.tgt[q], self.nrm[q]
        rg = np.einsum("ij,ij->i", vs - vt, nt)
        terms = self.lam * rg**2
        out = {"mask": m, "vs": vs, "vt": vt, "nt": nt, "rg": rg, "q": q}
        if self.use_color:
            proj = vs - rg[:, None] * nt
            dit = self.grad[q]
            rc = np.einsum("ij,ij->i", dit, proj - vt) + self.c_tgt[q] - self.c_src[m]
            terms = terms + (1.0 - self.lam) * rc**2
            out["rc"] = rc
            out["dit"] = dit
        active = terms < self.cap
        out["active"] = active
        n = len(self.src)
        out["objective"] = float((terms[active].sum() + self.cap * (n - active.sum())) / n)
        out["fitness"] = float(m.mean())
        out["rmse"] = float(np.sqrt(np.mean(d[m] ** 2))) if m.any() else 0.0
        return out

    def step(self, ev) -> np.ndarray:
        a = ev["active"]
        vs, nt = ev["vs"][a], ev["nt"][a]
        sg = math.sqrt(self.lam)
        jg = sg * np.hstack([np.cross(vs, nt), nt])
        rg = sg * ev["rg"][a]
        jtj = jg.T @ jg
        jtr = jg.T @ rg
        if self.use_color:
            sc = math.sqrt(1.0 - self.lam)
            dit = ev["dit"][a]
            ditm = dit - nt * np.einsum("ij,ij->i", dit, nt)[:, None]
            jc = sc * np.hstack([np.cross(vs, ditm), ditm])
            rc = sc * ev["rc"][a]
            jtj += jc.T @ jc
            jtr += jc.T @ rc
        try:
            return -np.linalg.solve(jtj, jtr)
        except np.linalg.LinAlgError:
            return -np.linalg.lstsq(jtj, jtr, rcond=None)[0]


def _twist_to_transform(x: np.ndarray) -> RigidTransform:
    return RigidTransform(so3_exp(x[:3]), x[3:])


def colored_icp(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform,
    params: RegistrationParams,
    target_index: Optional[SpatialIndex] = None,
    target_gradients: Optional[np.ndarray] = None,
) -> RegistrationResult:
    """Refine ``init`` by Gauss-Newton on the joint geometric/photometric objective.

    Correspondences are nearest target points within ``params.inlier_distance``.
    Each iteration takes a Gauss-Newton step, halving it until the objective does
    not increase; iteration stops when no step is accepted, when fitness and RMSE
    settle to a relative change below 1e-6, or after ``icp_max_iterations``.
    Without colors on both clouds the photometric term is dropped and this is
    point-to-plane ICP.
    """
    if target.normals is None:
        raise PreconditionError("colored ICP requires target normals")
    index = target_index if target_index is not None else SpatialIndex(target)
    use_color = source.colors is not None and target.colors is not None and params.lambda_geometric < 1.0
    if use_color and target_gradients is None:
        target_gradients = color_gradients(target, params.normal_search_radius, index)
    prob = _IcpProblem(source, target, params, index, target_gradients)

    t = init
    ev = prob.evaluate(t)
    if not ev["mask"].any():
        return RegistrationResult(init, 0.0, 0.0, 0, (ev["objective"],))
    history = [ev["objective"]]
    iters = 0
    for _ in range(params.icp_max_iterations):
        if ev["active"].sum() < 3:
            break
        x = prob.step(ev)
        accepted = None
        for _half in range(8):
            cand = _twist_to_transform(x) @ t
            ev_c = prob.evaluate(cand)
            if ev_c["mask"].any() and ev_c["objective"] <= ev["objective"]:
                accepted = (cand, ev_c)
                break
            x = 0.5 * x
        if accepted is None:
            break
        iters += 1
        old = ev
        t, ev = accepted
        history.append(ev["objective"])
        if _settled(old["fitness"], ev["fitness"]) and _settled(old["rmse"], ev["rmse"]):
            break
    return RegistrationResult(t, ev["fitness"], ev["rmse"], iters, tuple(history))


def _settled(a: float, b: float, tol: float = 1e-6) -> bool:
    return abs(a - b) <= tol * max(abs(a), abs(b), 1e-12)


# --- full pipeline -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Level:
    """One resolution of a cloud: points with normals, its index and color gradients."""

    cloud: PointCloud
    index: SpatialIndex
    gradients: Optional[np.ndarray] = None
    voxel_size: float = DEFAULT_VOXEL_SIZE


@dataclass(frozen=True, eq=False)
class PreparedCloud:
    """A cloud after downsampling, normal estimation and FPFH, reusable across runs.

    ``levels[0]`` is the base resolution used for features; further entries
    follow ``params.refine_levels``.
    """

    levels: tuple
    features: FeatureSet

    @property
    def cloud(self) -> PointCloud:
        return self.levels[0].cloud

    @property
    def index(self) -> SpatialIndex:
        return self.levels[0].index

    @property
    def gradients(self):
        return self.levels[0].gradients


def _level(cloud: PointCloud, voxel: float, radius: float, with_gradients: bool, viewpoint=None) -> Level:
    down = voxel_downsample(cloud, voxel)
    if len(down) < 5:
        raise InsufficientPointsError(f"only {len(down)} points left after downsampling")
    index = SpatialIndex(down)
    est = estimate_normals(down, radius, viewpoint=None, index=index)
    ref = down.normals
    if ref is None and viewpoint is not None:
        ref = np.asarray(viewpoint) - down.points
    est = orient_normals(est, ref)
    grads = color_gradients(est, radius, index) if with_gradients and est.colors is not None else None
    return Level(est, index, grads, voxel)


def prepare(cloud: PointCloud, params: RegistrationParams, with_gradients: bool = True) -> PreparedCloud:
    """Downsample, estimate oriented normals and compute descriptors.

    Fresh normals are flipped to agree with the cloud's own normals when it has
    them, otherwise toward ``params.viewpoint`` or away from the centroid. The
    descriptors are sign-sensitive, so observed and stored normals must agree.
    """
    radius = params.normal_search_radius
    base = _level(cloud, params.voxel_size, radius, with_gradients, params.viewpoint)
    feats = compute_fpfh(base.cloud, params.feature_search_radius, base.index)
    levels = [base]
    for frac in params.refine_levels:
        # Finer levels only densify the samples; normals keep the base radius so noise does not dominate.
        try:
            levels.append(_level(cloud, frac * params.voxel_size, radius, with_gradients, params.viewpoint))
        except InsufficientPointsError:
            break
    return PreparedCloud(tuple(levels), feats)


def match_prepared(src: PreparedCloud, tgt: PreparedCloud, params: RegistrationParams) -> np.ndarray:
    """Descriptor correspondences between prepared clouds, color-augmented when possible."""
    fs, ft = src.features, tgt.features
    w = params.color_feature_weight
    if w > 0 and src.cloud.colors is not None and tgt.cloud.colors is not None:
        fs = FeatureSet(np.hstack([fs.descriptors, w * src.cloud.colors]), fs.radius)
        ft = FeatureSet(np.hstack([ft.descriptors, w * tgt.cloud.colors]), ft.radius)
    return match_features(fs, ft, params.mutual_filter)


def register_once(src: PreparedCloud, tgt: PreparedCloud, params: RegistrationParams, seed: int, correspondences=None):
    """One seeded pass: RANSAC, colored ICP per level, then fitness at the fitness radius."""
    if correspondences is None:
        correspondences = match_prepared(src, tgt, params)
    coarse = ransac_register(
        src.cloud, tgt.cloud, src.features, tgt.features, params, seed,
        correspondences=correspondences, target_index=tgt.index,
    )
    if coarse.fitness == 0.0:
        return RegistrationResult.failure(coarse.transform, coarse.iterations_used, seed)
    fine = colored_icp(src.cloud, tgt.cloud, coarse.transform, params, tgt.index, tgt.gradients)
    t, iters, history = fine.transform, coarse.iterations_used + fine.iterations_used, fine.objective_history
    for s_lvl, t_lvl in zip(src.levels[1:], tgt.levels[1:]):
        step = colored_icp(s_lvl.cloud, t_lvl.cloud, t, params, t_lvl.index, t_lvl.gradients)
        if step.fitness > 0.0:
            t, history = step.transform, step.objective_history
            iters += step.iterations_used
    fit, rmse = fitness_score(src.cloud, tgt.cloud, t, params.fitness_distance, tgt.index)
    return RegistrationResult(t, fit, rmse, iters, history, seed=seed)


def register(source, target, params: Optional[RegistrationParams] = None) -> RegistrationResult:
    """Best of ``params.n_runs`` seeded pipeline passes.

    ``source`` and ``target`` may be raw clouds or :class:`PreparedCloud` objects
    from :func:`prepare` (preparation is deterministic, so sharing it across runs or
    calls changes nothing). Runs use seeds ``rng_seed .. rng_seed + n_runs - 1``;
    the winner has the highest fitness, then the lowest inlier RMSE, then the lowest
    seed. Clouds too small to register produce a fitness-0 result.
    """
    params = params or RegistrationParams()
    try:
        src = source if isinstance(source, PreparedCloud) else prepare(source, params, with_gradients=False)
        tgt = target if isinstance(target, PreparedCloud) else prepare(target, params)
    except InsufficientPointsError:
        return RegistrationResult.failure(seed=params.rng_seed)
    corres = match_prepared(src, tgt, params)
    results = [register_once(src, tgt, params, params.rng_seed + k, corres) for k in range(params.n_runs)]
    records = tuple(RunRecord(r.seed, r.fitness, r.inlier_rmse, r.iterations_used) for r in results)
    best = min(results, key=lambda r: (-r.fitness, r.inlier_rmse, r.seed))
    return RegistrationResult(
        best.transform, best.fitness, best.inlier_rmse, best.iterations_used,
        best.objective_history, records, best.seed,
    )
