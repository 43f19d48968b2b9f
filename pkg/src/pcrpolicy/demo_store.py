"""Combined demonstration clouds and the key -> clouds dictionary they live in."""

from __future__ import annotations

import json
import os
import shutil
import tempfile
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from .errors import InvalidKeyError, InvalidParameterError, PlyFormatError
from .geometry import (
    DEFAULT_VOXEL_SIZE,
    PointCloud,
    RigidTransform,
    estimate_normals,
    merge_clouds,
    orient_normals,
    transform_cloud,
    voxel_downsample,
)
from .plyio import read_ply, write_ply

FORMAT_VERSION = 1
STAGES = ("pick", "preplace", "place")


def stage_key(task: str, stage: str) -> str:
    return f"{task}:{stage}"


@dataclass(frozen=True, eq=False)
class DemoSample:
    """Two object clouds and the transforms that put them in the demonstrated configuration."""

    cloud_a: PointCloud
    cloud_b: PointCloud
    t_a: RigidTransform
    t_b: RigidTransform
    key: str

    def __post_init__(self):
        if not self.key:
            raise InvalidKeyError("demo sample key must be non-empty")
        if len(self.cloud_a) == 0 or len(self.cloud_b) == 0:
            raise InvalidParameterError("demo sample clouds must be non-empty")


@dataclass(frozen=True, eq=False)
class KeyframeDemo:
    """One demonstrated pick-place step with world-frame gripper poses."""

    pick_pose: RigidTransform
    preplace_pose: RigidTransform
    place_pose: RigidTransform
    gripper_cloud: PointCloud
    object_cloud: PointCloud
    placement_cloud: PointCloud
    task: str


def _with_normals(cloud: PointCloud, radius: float) -> PointCloud:
    if cloud.normals is not None or len(cloud) < 3:
        return cloud
    return orient_normals(estimate_normals(cloud, radius, viewpoint=None))


def build_combined(sample: DemoSample, voxel_size: Optional[float] = DEFAULT_VOXEL_SIZE) -> PointCloud:
    """``t_a * cloud_a`` followed by ``t_b * cloud_b``, voxel-downsampled.

    A constituent without normals gets PCA normals oriented away from its own
    centroid first, so the stored cloud always carries outward-ish normals.
    Pass ``voxel_size=None`` to skip downsampling.
    """
    radius = 2.0 * (voxel_size or DEFAULT_VOXEL_SIZE)
    a = transform_cloud(sample.t_a, _with_normals(sample.cloud_a, radius))
    b = transform_cloud(sample.t_b, _with_normals(sample.cloud_b, radius))
    merged = merge_clouds(a, b)
    return merged if voxel_size is None else voxel_downsample(merged, voxel_size)


def samples_from_keyframes(demo: KeyframeDemo) -> list[DemoSample]:
    """Pick, preplace and place samples of one demonstrated step.

    The pick sample places the gripper at the pick pose next to the untouched
    object. Preplace and place keep the placement fixed and carry the object by
    the gripper's motion since the pick, ``pose @ pick_pose^-1``.
    """
    ident = RigidTransform.identity()
    pick_inv = demo.pick_pose.inverse()
    return [
        DemoSample(demo.gripper_cloud, demo.object_cloud, demo.pick_pose, ident, stage_key(demo.task, "pick")),
        DemoSample(demo.placement_cloud, demo.object_cloud, ident, demo.preplace_pose @ pick_inv,
                   stage_key(demo.task, "preplace")),
        DemoSample(demo.placement_cloud, demo.object_cloud, ident, demo.place_pose @ pick_inv,
                   stage_key(demo.task, "place")),
    ]


class DemoStore:
    """Append-only dictionary from a description key to its combined clouds.

    Keys are opaque strings. Lookups may run concurrently; writes take a lock.
    """

    def __init__(self, voxel_size: float = DEFAULT_VOXEL_SIZE):
        self.voxel_size = voxel_size
        self._entries: dict[str, list[PointCloud]] = {}
        self._demo_ids: dict[str, list[Optional[str]]] = {}
        self._lock = threading.Lock()

    def add(self, key: str, combined: PointCloud, demo_id: Optional[str] = None) -> "DemoStore":
        if not isinstance(key, str) or not key:
            raise InvalidKeyError("store key must be a non-empty string")
        with self._lock:
            self._entries.setdefault(key, []).append(combined)
            self._demo_ids.setdefault(key, []).append(demo_id)
        return self

    def lookup(self, key: str) -> list[PointCloud]:
        return list(self._entries.get(key, ()))

    def demo_ids(self, key: str) -> list[Optional[str]]:
        return list(self._demo_ids.get(key, ()))

    def keys(self) -> list[str]:
        return list(self._entries)

    def __contains__(self, key) -> bool:
        return key in self._entries

    def __len__(self):
        return sum(len(v) for v in self._entries.values())

    def counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self._entries.items()}

    def add_demo(self, demo: KeyframeDemo, demo_id: Optional[str] = None) -> "DemoStore":
        """Decompose a keyframe demo and store its three combined clouds."""
        for s in samples_from_keyframes(demo):
            self.add(s.key, build_combined(s, self.voxel_size), demo_id)
        return self


def store(ds: DemoStore, key: str, combined: PointCloud) -> DemoStore:
    return ds.add(key, combined)


def lookup(ds: DemoStore, key: str) -> list[PointCloud]:
    return ds.lookup(key)


def save_store(ds: DemoStore, directory, created: Optional[str] = None) -> Path:
    """Persist ``ds`` as ``manifest.json`` plus one binary PLY per cloud.

    Coordinates are written as doubles so a reload is bit-exact. The directory is
    written to a temporary sibling first and renamed into place, so a failure never
    leaves a partial store behind.
    """
    target = Path(directory)
    if target.exists():
        raise FileExistsError(f"{target} already exists")
    if created is None:
        created = datetime.now(timezone.utc).replace(microsecond=0).isoformat()
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        (tmp / "clouds").mkdir()
        entries = {}
        n = 0
        for key in ds.keys():
            rows = []
            for cloud, demo_id in zip(ds.lookup(key), ds.demo_ids(key)):
                rel = f"clouds/{n:06d}.ply"
                write_ply(tmp / rel, cloud, binary=True, double=True)
                rows.append({"path": rel, "demo_id": demo_id, "points": len(cloud)})
                n += 1
            entries[key] = rows
        manifest = {
            "format_version": FORMAT_VERSION,
            "voxel_size": ds.voxel_size,
            "created": created,
            "entries": entries,
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        os.replace(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return target


def load_store(directory) -> DemoStore:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise PlyFormatError(f"{d}: cannot read manifest ({e})") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise PlyFormatError(f"{d}: unsupported store format_version {version!r}")
    ds = DemoStore(manifest.get("voxel_size", DEFAULT_VOXEL_SIZE))
    for key, rows in manifest["entries"].items():
        for row in rows:
            ds.add(key, read_ply(d / row["path"]), row.get("demo_id"))
    return ds
