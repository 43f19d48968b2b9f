"""Procedural objects, partial views, sensor noise and scripted pick-place episodes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidParameterError
from .geometry import (
    PointCloud,
    RigidTransform,
    rotation_about_axis,
    rotation_angle,
    transform_cloud,
)
from .demo_store import KeyframeDemo
from .plyio import read_ply, write_ply

PREPLACE_OFFSET = 0.08
WORKSPACE = 0.48
FINGER_GAP = 0.04
GRIPPER_DENSITY = 60_000.0
DEFAULT_CAMERA = (0.8, 0.0, 0.6)

KINDS = ("box", "cylinder", "l_shape", "mug", "box_cylinder", "articulated")

DEFAULT_DIMENSIONS = {
    "box": (0.10, 0.06, 0.04),
    "cylinder": (0.03, 0.10),
    # long arm, short arm, arm width, height
    "l_shape": (0.14, 0.09, 0.04, 0.03),
    # radius, height, wall thickness, handle reach
    "mug": (0.035, 0.09, 0.006, 0.03),
    # box x, y, z, cylinder radius, cylinder height
    "box_cylinder": (0.10, 0.07, 0.04, 0.02, 0.06),
    # frame x, y, z, drawer inset, handle reach
    "articulated": (0.16, 0.20, 0.10, 0.01, 0.025),
}


@dataclass(frozen=True)
class SceneSpec:
    """Description of one procedural object.

    ``density`` is in points per square meter of surface; colors are RGB triples
    used by the surface pattern (``uniform`` uses only the first).
    """

    kind: str = "box"
    dimensions: Optional[tuple] = None
    color_pattern: str = "gradient"
    colors: tuple = ((0.9, 0.2, 0.1), (0.1, 0.3, 0.9))
    density: float = 40_000.0
    seed: int = 0
    checker_size: float = 0.02

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameterError(f"unknown object kind {self.kind!r}; expected one of {KINDS}")
        if self.color_pattern not in ("uniform", "gradient", "checker"):
            raise InvalidParameterError(f"unknown color pattern {self.color_pattern!r}")
        dims = tuple(float(d) for d in (self.dimensions or DEFAULT_DIMENSIONS[self.kind]))
        if len(dims) != len(DEFAULT_DIMENSIONS[self.kind]) or min(dims) <= 0:
            raise InvalidParameterError(f"bad dimensions {dims} for kind {self.kind!r}")
        object.__setattr__(self, "dimensions", dims)
        object.__setattr__(self, "colors", tuple(tuple(float(x) for x in c) for c in self.colors))
        if self.density * _total_area(_patches(self)) < 200:
            raise InvalidParameterError("density too low: fewer than 200 points per object")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["dimensions"] = tuple(d["dimensions"])
        d["colors"] = tuple(tuple(c) for c in d["colors"])
        return cls(**d)


# --- surface patches ---------------------------------------------------------
# Each patch is (kind, params); sampling is uniform in area.


def _rect(origin, u, v, normal):
    return ("rect", (np.asarray(origin, float), np.asarray(u, float), np.asarray(v, float), np.asarray(normal, float)))


def _box_patches(lo, hi, skip=()):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ext = hi - lo
    out = []
    for axis in range(3):
        a, b = [k for k in range(3) if k != axis]
        u = np.zeros(3)
        u[a] = ext[a]
        v = np.zeros(3)
        v[b] = ext[b]
        for side, base in ((-1, lo), (1, hi)):
            if (axis, side) in skip:
                continue
            origin = lo.copy()
            origin[axis] = base[axis]
            n = np.zeros(3)
            n[axis] = side
            out.append(_rect(origin, u, v, n))
    return out


def _cylinder_patches(radius, z0, z1, outward=True, center=(0.0, 0.0)):
    return [("lateral", (float(radius), float(z0), float(z1), 1.0 if outward else -1.0, np.asarray(center, float)))]


def _disk(radius_in, radius_out, z, up, center=(0.0, 0.0)):
    return ("disk", (float(radius_in), float(radius_out), float(z), 1.0 if up else -1.0, np.asarray(center, float)))


def _patch_area(p):
    kind, a = p
    if kind == "rect":
        return float(np.linalg.norm(a[1]) * np.linalg.norm(a[2]))
    if kind == "lateral":
        return 2.0 * np.pi * a[0] * (a[2] - a[1])
    if kind == "disk":
        return np.pi * (a[1] ** 2 - a[0] ** 2)
    raise AssertionError(kind)


def _total_area(patches):
    return sum(_patch_area(p) for p in patches)


def _sample_patch(p, n, rng):
    kind, a = p
    if kind == "rect":
        o, u, v, nrm = a
        s = rng.random((n, 2))
        return o + s[:, :1] * u + s[:, 1:] * v, np.tile(nrm, (n, 1))
    if kind == "lateral":
        r, z0, z1, sign, c = a
        th = rng.random(n) * 2.0 * np.pi
        z = z0 + rng.random(n) * (z1 - z0)
        radial = np.column_stack([np.cos(th), np.sin(th), np.zeros(n)])
        pts = np.column_stack([c[0] + r * radial[:, 0], c[1] + r * radial[:, 1], z])
        return pts, sign * radial
    if kind == "disk":
        r0, r1, z, sign, c = a
        th = rng.random(n) * 2.0 * np.pi
        rr = np.sqrt(r0**2 + rng.random(n) * (r1**2 - r0**2))
        pts = np.column_stack([c[0] + rr * np.cos(th), c[1] + rr * np.sin(th), np.full(n, z)])
        return pts, np.tile([0.0, 0.0, sign], (n, 1))
    raise AssertionError(kind)


def _patches(spec: SceneSpec):
    d = spec.dimensions
    k = spec.kind
    if k == "box":
        h = np.asarray(d) / 2
        return _box_patches(-h, h)
    if k == "cylinder":
        r, hgt = d
        return _cylinder_patches(r, -hgt / 2, hgt / 2) + [_disk(0, r, -hgt / 2, False), _disk(0, r, hgt / 2, True)]
    if k == "l_shape":
        a, b, w, h = d
        # L footprint: [0,a]x[0,w] plus [0,w]x[w,b], shifted so the bounding box is centered.
        off = np.array([-a / 2, -b / 2, -h / 2])
        out = []
        for z, s in ((0.0, -1.0), (h, 1.0)):
            out.append(_rect(off + [0, 0, z], [a, 0, 0], [0, w, 0], [0, 0, s]))
            out.append(_rect(off + [0, w, z], [w, 0, 0], [0, b - w, 0], [0, 0, s]))
        sides = [
            ([0, 0, 0], [0, b, 0], [-1, 0, 0]),
            ([0, 0, 0], [a, 0, 0], [0, -1, 0]),
            ([a, 0, 0], [0, w, 0], [1, 0, 0]),
            ([w, w, 0], [a - w, 0, 0], [0, 1, 0]),
            ([w, w, 0], [0, b - w, 0], [1, 0, 0]),
            ([0, b, 0], [w, 0, 0], [0, 1, 0]),
        ]
        for o, u, n in sides:
            out.append(_rect(off + o, u, [0, 0, h], n))
        return out
    if k == "mug":
        r, h, t, reach = d
        z0, z1 = -h / 2, h / 2
        out = _cylinder_patches(r, z0, z1) + _cylinder_patches(r - t, z0 + t, z1, outward=False)
        out += [_disk(0, r, z0, False), _disk(0, r - t, z0 + t, True), _disk(r - t, r, z1, True)]
        hw = 0.006
        out += _box_patches([r, -hw, z1 - 0.025 - 0.008], [r + reach, hw, z1 - 0.025], skip={(0, -1)})
        out += _box_patches([r + reach - 0.008, -hw, z0 + 0.015], [r + reach, hw, z1 - 0.033], skip={(2, -1), (2, 1)})
        out += _box_patches([r, -hw, z0 + 0.015 - 0.008], [r + reach, hw, z0 + 0.015], skip={(0, -1)})
        return out
    if k == "box_cylinder":
        bx, by, bz, cr, ch = d
        out = _box_patches([-bx / 2, -by / 2, -bz / 2], [bx / 2, by / 2, bz / 2])
        c = (bx / 4, by / 5)
        out += _cylinder_patches(cr, bz / 2, bz / 2 + ch, center=c) + [_disk(0, cr, bz / 2 + ch, True, c)]
        return out
    if k == "articulated":
        frame, drawer = _articulated_patches(spec)
        return frame + drawer
    raise AssertionError(k)


def _articulated_patches(spec: SceneSpec):
    """Cabinet frame (open toward +x, with a top rail marking the back) and drawer."""
    fx, fy, fz, inset, reach = spec.dimensions
    t = 0.008
    lo, hi = np.array([-fx / 2, -fy / 2, -fz / 2]), np.array([fx / 2, fy / 2, fz / 2])
    frame = _box_patches(lo, hi, skip={(0, 1)})
    frame += _box_patches([-fx / 2, fy / 2 - 0.03, fz / 2], [-fx / 2 + 0.04, fy / 2, fz / 2 + 0.02], skip={(2, -1)})
    dlo = lo + [t + inset, t + inset, t]
    dhi = np.array([fx / 2, fy / 2 - t - inset, fz / 2 - t - inset])
    drawer = _box_patches(dlo, dhi, skip={(2, 1)})
    hz = dlo[2] + 0.6 * (dhi[2] - dlo[2])
    drawer += _box_patches([fx / 2, -0.03, hz - 0.006], [fx / 2 + reach, 0.03, hz + 0.006], skip={(0, -1)})
    drawer += _box_patches([fx / 2, -0.03 + 0.015, hz + 0.006], [fx / 2 + 0.01, -0.015 + 0.015, hz + 0.016])
    return frame, drawer


def _bounds(patches):
    """Axis-aligned bounds of the analytic surface, independent of any sample."""
    corners = []
    for kind, a in patches:
        if kind == "rect":
            o, u, v, _ = a
            corners += [o, o + u, o + v, o + u + v]
        else:
            r, c = (a[0], a[4]) if kind == "lateral" else (a[1], a[4])
            zs = (a[1], a[2]) if kind == "lateral" else (a[2],)
            corners += [[c[0] + sx * r, c[1] + sy * r, z] for sx in (-1, 1) for sy in (-1, 1) for z in zs]
    corners = np.asarray(corners, dtype=np.float64)
    return corners.min(axis=0), corners.max(axis=0)


def _colorize(spec: SceneSpec, pts: np.ndarray, bounds=None) -> np.ndarray:
    c0, c1 = np.asarray(spec.colors[0]), np.asarray(spec.colors[-1])
    if spec.color_pattern == "uniform":
        return np.tile(c0, (len(pts), 1))
    if spec.color_pattern == "gradient":
        # Normalized by the shape's bounds so every resampling sees the same color field.
        lo, hi = bounds if bounds is not None else _bounds(_patches(spec))
        x0, x1 = lo[0] + 0.5 * lo[2], hi[0] + 0.5 * hi[2]
        s = np.clip((pts[:, 0] + 0.5 * pts[:, 2] - x0) / max(x1 - x0, 1e-12), 0.0, 1.0)
        return (1 - s)[:, None] * c0 + s[:, None] * c1
    parity = np.floor(pts / spec.checker_size).astype(np.int64).sum(axis=1) % 2
    return np.where(parity[:, None] == 0, c0, c1)


def _sample(patches, density, rng):
    areas = np.array([_patch_area(p) for p in patches])
    n = int(round(density * areas.sum()))
    counts = rng.multinomial(n, areas / areas.sum())
    pts, nrm = [], []
    for p, c in zip(patches, counts):
        a, b = _sample_patch(p, int(c), rng)
        pts.append(a)
        nrm.append(b)
    return np.vstack(pts), np.vstack(nrm)


def make_cloud(spec: SceneSpec) -> PointCloud:
    """Uniform surface samples with analytic outward normals and patterned colors.

    The object sits in its own frame, roughly centered at the origin.
    """
    rng = np.random.default_rng(spec.seed)
    pts, nrm = _sample(_patches(spec), spec.density, rng)
    return PointCloud(pts, _colorize(spec, pts), nrm)


def make_articulated_parts(spec: SceneSpec):
    """``(frame, drawer)`` clouds of a two-part articulated object, drawer closed."""
    if spec.kind != "articulated":
        raise InvalidParameterError("make_articulated_parts needs an articulated spec")
    rng = np.random.default_rng(spec.seed)
    frame_p, drawer_p = _articulated_patches(spec)
    fp, fn = _sample(frame_p, spec.density, rng)
    dp, dn = _sample(drawer_p, spec.density, rng)
    frame_spec = SceneSpec("box", (1, 1, 1), "gradient", spec.colors, spec.density, spec.seed)
    drawer_spec = SceneSpec("box", (1, 1, 1), "checker", ((0.95, 0.85, 0.2), (0.2, 0.6, 0.2)), spec.density, spec.seed)
    b = _bounds(frame_p + drawer_p)
    return PointCloud(fp, _colorize(frame_spec, fp, b), fn), PointCloud(dp, _colorize(drawer_spec, dp, b), dn)


def make_gripper_cloud() -> PointCloud:
    """Canonical two-finger gripper: palm, two fingers and a cable mount.

    The origin is the grasp midpoint between the fingertips; the body extends
    toward -z. Inner finger faces are ``FINGER_GAP`` apart along x. The cable mount
    on the palm breaks the 180 degree symmetry about the approach axis.
    """
    half = FINGER_GAP / 2
    parts = [
        ([-0.045, -0.012, -0.075], [0.045, 0.012, -0.055], (0.25, 0.25, 0.28)),
        ([half, -0.01, -0.055], [half + 0.01, 0.01, 0.005], (0.85, 0.15, 0.15)),
        ([-half - 0.01, -0.01, -0.055], [-half, 0.01, 0.005], (0.15, 0.2, 0.85)),
        ([0.01, 0.012, -0.072], [0.035, 0.03, -0.058], (0.9, 0.9, 0.9)),
    ]
    rng = np.random.default_rng(20240501)
    pts, nrm, col = [], [], []
    for lo, hi, c in parts:
        p, n = _sample(_box_patches(lo, hi), GRIPPER_DENSITY, rng)
        pts.append(p)
        nrm.append(n)
        col.append(np.tile(c, (len(p), 1)))
    return PointCloud(np.vstack(pts), np.vstack(col), np.vstack(nrm))


# --- observation models ------------------------------------------------------


def partial_view(p: PointCloud, camera_pos) -> PointCloud:
    """Keep points whose normal faces the camera (back-face culling)."""
    if p.normals is None:
        raise InvalidParameterError("partial_view needs normals")
    cam = np.asarray(camera_pos, dtype=np.float64)
    keep = np.einsum("ij,ij->i", p.normals, cam - p.points) > 0
    return p.select(keep)


def add_noise(p: PointCloud, sigma: float, seed: int) -> PointCloud:
    """I.i.d. Gaussian jitter per coordinate; colors kept, normals dropped."""
    if sigma < 0:
        raise InvalidParameterError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    jitter = rng.normal(0.0, sigma, size=p.points.shape) if sigma > 0 else 0.0
    return PointCloud(p.points + jitter, p.colors, None)


def pose_error(estimate: RigidTransform, truth: RigidTransform):
    """``(rotation error in radians, translation error in meters)``."""
    rel = estimate.rotation @ truth.rotation.T
    return rotation_angle(rel), float(np.linalg.norm(estimate.translation - truth.translation))


def random_rotation(rng: np.random.Generator, mode: str = "so3") -> np.ndarray:
    """Haar-uniform rotation, or a uniform yaw about +z when ``mode == 'yaw'``."""
    if mode == "so3":
        return Rotation.random(random_state=rng).as_matrix()
    if mode == "yaw":
        return rotation_about_axis((0, 0, 1), rng.uniform(-np.pi, np.pi)).rotation
    raise InvalidParameterError(f"unknown rotation mode {mode!r}")


def random_pose(rng: np.random.Generator, mode: str = "so3", extent: float = WORKSPACE) -> RigidTransform:
    return RigidTransform(random_rotation(rng, mode), rng.uniform(-extent / 2, extent / 2, size=3))


# --- episodes ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Episode:
    """A scripted demonstration plus one test scene with ground-truth actions.

    ``g_a`` and ``g_b`` move the placement and the object from their demo poses
    to their test poses. ``truth`` maps ``pick``/``preplace``/``place`` to the
    ground-truth actions for the test scene.
    """

    demo: KeyframeDemo
    test_gripper: PointCloud
    test_object: PointCloud
    test_placement: PointCloud
    g_a: RigidTransform
    g_b: RigidTransform
    truth: dict
    seed: int
    object_spec: SceneSpec
    placement_spec: SceneSpec
    meta: dict = field(default_factory=dict)
    demos: tuple = ()

    def __post_init__(self):
        if not self.demos:
            object.__setattr__(self, "demos", (self.demo,))


def default_specs(seed: int = 0):
    # The mug's 6 mm walls sit below two voxels, which smears its normals; a
    # box with a post is the default carried object instead.
    obj = SceneSpec("box_cylinder", color_pattern="gradient", colors=((0.95, 0.3, 0.1), (0.2, 0.2, 0.8)), seed=seed)
    base = SceneSpec("l_shape", color_pattern="gradient", colors=((0.1, 0.7, 0.3), (0.9, 0.9, 0.2)), seed=seed + 1)
    return obj, base


def _top(spec: SceneSpec) -> float:
    d = spec.dimensions
    if spec.kind == "box":
        return d[2] / 2
    if spec.kind in ("cylinder", "mug"):
        return d[1] / 2
    if spec.kind == "l_shape":
        return d[3] / 2
    if spec.kind == "box_cylinder":
        return d[2] / 2 + d[4]
    return d[2] / 2


def observe(cloud: PointCloud, camera: str, noise: float, seed: int, camera_pos=DEFAULT_CAMERA) -> PointCloud:
    """Apply the camera model (``multi`` keeps everything) and then sensor noise."""
    if camera == "single":
        cloud = partial_view(cloud, camera_pos)
    elif camera != "multi":
        raise InvalidParameterError(f"unknown camera mode {camera!r}")
    if noise > 0:
        cloud = add_noise(cloud, noise, seed)
    return cloud


def make_episode(
    specs=None,
    seed: int = 0,
    rotation: str = "so3",
    camera: str = "multi",
    noise: float = 0.0,
    task: str = "place-object",
    n_demos: int = 1,
) -> Episode:
    """Script a demo and a randomized test scene with known actions.

    The demo grasps the object from above and sets it on top of the placement
    (with a yaw), the preplace waypoint hovering ``PREPLACE_OFFSET`` meters higher
    along the placement's +z. The test scene resamples both objects under fresh
    random poses; ``camera``/``noise`` shape only the test observation, demos are
    complete noise-free clouds.

    With ``n_demos > 1`` extra demonstrations of the same relative placement are
    drawn under their own random poses and resampled clouds (``Episode.demos``).
    They come from a separate stream, so the test scene for a seed does not
    depend on ``n_demos``.
    """
    if n_demos < 1:
        raise InvalidParameterError(f"n_demos must be >= 1, got {n_demos}")
    obj_spec, base_spec = specs or default_specs(seed)
    rng = np.random.default_rng(seed)
    obj_local = make_cloud(obj_spec)
    base_local = make_cloud(base_spec)

    x_a = random_pose(rng, "yaw")
    x_b = random_pose(rng, "yaw")
    grasp = RigidTransform.from_translation((0.0, 0.0, _top(obj_spec))) @ rotation_about_axis((1, 0, 0), np.pi)
    rel = RigidTransform.from_translation((0.0, 0.0, _top(base_spec) + _top(obj_spec) + 0.002)) @ rotation_about_axis(
        (0, 0, 1), rng.uniform(-np.pi, np.pi)
    )
    lift = RigidTransform.from_translation((0.0, 0.0, PREPLACE_OFFSET))
    pick = x_b @ grasp
    place = x_a @ rel @ grasp
    preplace = x_a @ lift @ rel @ grasp
    demo = KeyframeDemo(
        pick_pose=pick,
        preplace_pose=preplace,
        place_pose=place,
        gripper_cloud=make_gripper_cloud(),
        object_cloud=transform_cloud(x_b, obj_local),
        placement_cloud=transform_cloud(x_a, base_local),
        task=task,
    )

    x_a_test = random_pose(rng, rotation)
    x_b_test = random_pose(rng, rotation)
    g_a = x_a_test @ x_a.inverse()
    g_b = x_b_test @ x_b.inverse()
    truth = {
        "pick": g_b @ pick,
        "preplace": g_a @ preplace @ pick.inverse() @ g_b.inverse(),
        "place": g_a @ place @ pick.inverse() @ g_b.inverse(),
    }
    test_seed = int(rng.integers(2**31))
    obj_test = make_cloud(_reseeded(obj_spec, test_seed))
    base_test = make_cloud(_reseeded(base_spec, test_seed + 1))
    test_object = observe(transform_cloud(x_b_test, obj_test), camera, noise, test_seed + 2)
    test_placement = observe(transform_cloud(x_a_test, base_test), camera, noise, test_seed + 3)
    demos = [demo]
    extra = np.random.default_rng([seed, 1])
    for k in range(1, n_demos):
        xa, xb = random_pose(extra, "yaw"), random_pose(extra, "yaw")
        ds = int(extra.integers(2**31))
        demos.append(KeyframeDemo(
            pick_pose=xb @ grasp,
            preplace_pose=xa @ lift @ rel @ grasp,
            place_pose=xa @ rel @ grasp,
            gripper_cloud=demo.gripper_cloud,
            object_cloud=transform_cloud(xb, make_cloud(_reseeded(obj_spec, ds))),
            placement_cloud=transform_cloud(xa, make_cloud(_reseeded(base_spec, ds + 1))),
            task=task,
        ))
    return Episode(
        demo, make_gripper_cloud(), test_object, test_placement, g_a, g_b, truth, seed, obj_spec, base_spec,
        {"rotation": rotation, "camera": camera, "noise": noise}, tuple(demos),
    )


def _reseeded(spec: SceneSpec, seed: int) -> SceneSpec:
    return SceneSpec(spec.kind, spec.dimensions, spec.color_pattern, spec.colors, spec.density, seed, spec.checker_size)


def unrelated_spec(seed: int = 0) -> SceneSpec:
    """A shape unlike the default episode objects, for adversarial observations."""
    # A curved, hollow mug in the default object's palette, so only geometry can
    # tell them apart. Flat-faced stand-ins (bars, pucks) lie flush on the stored
    # box faces and keep a third of their points within the fitness radius.
    return SceneSpec("mug", None, "gradient", ((0.95, 0.3, 0.1), (0.2, 0.2, 0.8)), seed=seed)


# --- drawer scenario ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DrawerEpisode:
    """Two pick-place rounds: open the drawer, then put a block inside.

    ``stages`` lists ``(key, role)`` in execution order; ``demos`` are the two
    :class:`KeyframeDemo` rounds; ``observations`` holds the test ``(P_a, P_b)``
    for each stage and ``truth`` the matching ground-truth actions.
    """

    demos: tuple
    stages: tuple
    observations: tuple
    truth: tuple
    seed: int


def make_drawer_episode(seed: int = 0, rotation: str = "yaw", open_distance: float = 0.09) -> DrawerEpisode:
    rng = np.random.default_rng(seed)
    cab_spec = SceneSpec("articulated", seed=seed)
    block_spec = SceneSpec("box_cylinder", (0.05, 0.035, 0.025, 0.01, 0.03), "gradient",
                           ((0.9, 0.1, 0.1), (0.9, 0.8, 0.1)), seed=seed + 7)
    frame_l, drawer_l = make_articulated_parts(cab_spec)
    block_l = make_cloud(block_spec)
    fx, fy, fz, inset, reach = cab_spec.dimensions
    hz = -fz / 2 + 0.008 + 0.6 * (fz - 0.016 - inset)

    x_cab = random_pose(rng, "yaw")
    x_blk = random_pose(rng, "yaw")
    opened = RigidTransform.from_translation((open_distance, 0.0, 0.0))
    # Handle grasp: approach along -x of the cabinet, fingers straddling the handle vertically.
    handle_grasp = RigidTransform.from_translation((fx / 2 + reach - 0.005, 0.0, hz)) @ RigidTransform(
        Rotation.from_euler("yz", [np.pi / 2, np.pi / 2]).as_matrix()
    )
    blk_top = block_spec.dimensions[2] / 2 + block_spec.dimensions[4]
    blk_grasp = RigidTransform.from_translation((0.0, 0.0, blk_top)) @ rotation_about_axis((1, 0, 0), np.pi)
    blk_in_drawer = RigidTransform.from_translation((0.0, 0.02, -fz / 2 + 0.008 + block_spec.dimensions[2] / 2 + 0.002))

    gripper = make_gripper_cloud()
    r1_pick = x_cab @ handle_grasp
    r1_place = x_cab @ opened @ handle_grasp
    demo1 = KeyframeDemo(r1_pick, r1_place, r1_place, gripper, transform_cloud(x_cab, drawer_l),
                         transform_cloud(x_cab, frame_l), "open-drawer")
    r2_pick = x_blk @ blk_grasp
    r2_place = x_cab @ opened @ blk_in_drawer @ blk_grasp
    r2_pre = x_cab @ opened @ RigidTransform.from_translation((0, 0, PREPLACE_OFFSET)) @ blk_in_drawer @ blk_grasp
    demo2 = KeyframeDemo(r2_pick, r2_pre, r2_place, gripper, transform_cloud(x_blk, block_l),
                         transform_cloud(x_cab @ opened, drawer_l), "put-block")

    x_cab_t = random_pose(rng, rotation)
    x_blk_t = random_pose(rng, rotation)
    ts = int(rng.integers(2**31))
    frame_t, drawer_t = make_articulated_parts(_reseeded(cab_spec, ts))
    block_t = make_cloud(_reseeded(block_spec, ts + 1))
    g_cab = x_cab_t @ x_cab.inverse()
    g_blk = x_blk_t @ x_blk.inverse()
    drawer_closed = transform_cloud(x_cab_t, drawer_t)
    drawer_open = transform_cloud(x_cab_t @ opened, drawer_t)
    frame_obs = transform_cloud(x_cab_t, frame_t)
    block_obs = transform_cloud(x_blk_t, block_t)

    stages = (("open-drawer:pick", "pick"), ("open-drawer:place", "place"),
              ("put-block:pick", "pick"), ("put-block:place", "place"))
    observations = ((gripper, drawer_closed), (frame_obs, drawer_closed), (gripper, block_obs), (drawer_open, block_obs))
    truth = (
        g_cab @ r1_pick,
        g_cab @ r1_place @ r1_pick.inverse() @ g_cab.inverse(),
        g_blk @ r2_pick,
        g_cab @ r2_place @ r2_pick.inverse() @ g_blk.inverse(),
    )
    return DrawerEpisode((demo1, demo2), stages, observations, truth, seed)


# --- export ------------------------------------------------------------------


def export_episode(ep: Episode, directory) -> Path:
    """Write an episode as PLY clouds plus ``episode.json`` (4x4 row-major poses)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    clouds = {
        "demo_gripper": ep.demo.gripper_cloud,
        "demo_object": ep.demo.object_cloud,
        "demo_placement": ep.demo.placement_cloud,
        "test_gripper": ep.test_gripper,
        "test_object": ep.test_object,
        "test_placement": ep.test_placement,
    }
    extra = []
    for k, dm in enumerate(ep.demos[1:], start=1):
        names = {r: f"demo{k}_{r}" for r in ("object", "placement")}
        clouds[names["object"]] = dm.object_cloud
        clouds[names["placement"]] = dm.placement_cloud
        extra.append({
            "poses": {"pick": _mat(dm.pick_pose), "preplace": _mat(dm.preplace_pose), "place": _mat(dm.place_pose)},
            "object": names["object"],
            "placement": names["placement"],
        })
    for name, c in clouds.items():
        write_ply(d / f"{name}.ply", c)
    record = {
        "format_version": 1,
        "task": ep.demo.task,
        "seed": ep.seed,
        "poses": {
            "pick": _mat(ep.demo.pick_pose),
            "preplace": _mat(ep.demo.preplace_pose),
            "place": _mat(ep.demo.place_pose),
        },
        "g_a": _mat(ep.g_a),
        "g_b": _mat(ep.g_b),
        "truth": {k: _mat(v) for k, v in ep.truth.items()},
        "clouds": {k: f"{k}.ply" for k in clouds},
        "specs": {"object": ep.object_spec.to_dict(), "placement": ep.placement_spec.to_dict()},
        "observation": ep.meta,
        "extra_demos": extra,
    }
    (d / "episode.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return d


def load_episode(directory) -> Episode:
    d = Path(directory)
    rec = json.loads((d / "episode.json").read_text())
    clouds = {k: read_ply(d / v) for k, v in rec["clouds"].items()}
    demo = KeyframeDemo(
        pick_pose=_tf(rec["poses"]["pick"]),
        preplace_pose=_tf(rec["poses"]["preplace"]),
        place_pose=_tf(rec["poses"]["place"]),
        gripper_cloud=clouds["demo_gripper"],
        object_cloud=clouds["demo_object"],
        placement_cloud=clouds["demo_placement"],
        task=rec["task"],
    )
    demos = [demo]
    for row in rec.get("extra_demos", []):
        demos.append(KeyframeDemo(
            _tf(row["poses"]["pick"]), _tf(row["poses"]["preplace"]), _tf(row["poses"]["place"]),
            clouds["demo_gripper"], clouds[row["object"]], clouds[row["placement"]], rec["task"],
        ))
    return Episode(
        demo, clouds["test_gripper"], clouds["test_object"], clouds["test_placement"],
        _tf(rec["g_a"]), _tf(rec["g_b"]), {k: _tf(v) for k, v in rec["truth"].items()}, rec["seed"],
        SceneSpec.from_dict(rec["specs"]["object"]), SceneSpec.from_dict(rec["specs"]["placement"]),
        rec.get("observation", {}), tuple(demos),
    )


def _mat(t: RigidTransform):
    return [float(x) for x in t.matrix.reshape(-1)]


def _tf(row_major) -> RigidTransform:
    return RigidTransform.from_matrix(np.asarray(row_major, dtype=np.float64).reshape(4, 4))
