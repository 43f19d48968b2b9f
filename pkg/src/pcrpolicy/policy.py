"""Keyframe policy: register observations to stored combined clouds and derive actions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .demo_store import DemoStore, stage_key
from .errors import InsufficientPointsError, InvalidParameterError, LowConfidenceError, NoCandidatesError, UnknownTaskError
from .geometry import PointCloud, RigidTransform
from .registration import PreparedCloud, RegistrationParams, prepare, register

ROLES = ("pick", "place")
STAGE_ROLES = (("pick", "pick"), ("preplace", "place"), ("place", "place"))


@dataclass(frozen=True, eq=False)
class PairRegistration:
    """Registration of both observed clouds against one stored combined cloud."""

    t_a_hat: RigidTransform
    t_b_hat: RigidTransform
    s_a: float
    s_b: float
    demo_index: int = 0

    def __post_init__(self):
        for name in ("s_a", "s_b"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidParameterError(f"{name} must lie in [0, 1], got {v}")

    @property
    def average_fitness(self) -> float:
        return 0.5 * (self.s_a + self.s_b)


def pick_action(pr: PairRegistration) -> RigidTransform:
    """Gripper pose relative to the observed pick target: ``T_b^-1 T_a``."""
    return pr.t_b_hat.inverse() @ pr.t_a_hat


def place_action(pr: PairRegistration) -> RigidTransform:
    """Motion of the picked object with the placement held still: ``T_a^-1 T_b``."""
    return pr.t_a_hat.inverse() @ pr.t_b_hat


def select_best(candidates: Sequence[PairRegistration]) -> PairRegistration:
    """Highest mean of ``s_a`` and ``s_b``; ties go to the lower ``demo_index``."""
    if not candidates:
        raise NoCandidatesError("no registration candidates to select from")
    return min(candidates, key=lambda c: (-c.average_fitness, c.demo_index))


class _Prepared:
    # Per-call memo so a cloud shared by several registrations is prepared once.
    def __init__(self, params: RegistrationParams):
        self.params = params
        self._memo: dict[tuple, Optional[PreparedCloud]] = {}

    def __call__(self, cloud, as_target: bool):
        if isinstance(cloud, PreparedCloud):
            return cloud
        k = (id(cloud), as_target)
        if k not in self._memo:
            try:
                self._memo[k] = prepare(cloud, self.params, with_gradients=as_target)
            except InsufficientPointsError:
                self._memo[k] = None
            self._memo[k + ("ref",)] = cloud  # keep id() stable while memoized
        return self._memo[k]


def _register(prep: _Prepared, source, target, params):
    src, tgt = prep(source, False), prep(target, True)
    if src is None or tgt is None:
        return RigidTransform.identity(), 0.0
    res = register(src, tgt, params)
    return res.transform, res.fitness


def infer_pair(
    p_a_hat: PointCloud,
    p_b_hat: PointCloud,
    p_ab: PointCloud,
    params: Optional[RegistrationParams] = None,
    demo_index: int = 0,
    _prep: Optional[_Prepared] = None,
) -> PairRegistration:
    """Register both observed clouds to ``p_ab`` independently."""
    params = params or RegistrationParams()
    prep = _prep or _Prepared(params)
    t_a, s_a = _register(prep, p_a_hat, p_ab, params)
    t_b, s_b = _register(prep, p_b_hat, p_ab, params)
    return PairRegistration(t_a, t_b, s_a, s_b, demo_index)


@dataclass(frozen=True, eq=False)
class StageResult:
    """Action inferred for one stored key, with the winning registration pair."""

    key: str
    role: str
    action: RigidTransform
    evidence: PairRegistration
    candidates: tuple = ()

    def accepted(self, threshold: float) -> bool:
        return self.evidence.average_fitness >= threshold

    def to_record(self, threshold: float, stage: Optional[str] = None) -> dict:
        return {
            "stage": stage or self.key,
            "key": self.key,
            "role": self.role,
            "transform": [float(x) for x in self.action.matrix.reshape(-1)],
            "s_a": float(self.evidence.s_a),
            "s_b": float(self.evidence.s_b),
            "demo_index": int(self.evidence.demo_index),
            "accepted": bool(self.accepted(threshold)),
        }


def infer_stage(
    store: DemoStore,
    key: str,
    role: str,
    p_a_hat: PointCloud,
    p_b_hat: PointCloud,
    params: Optional[RegistrationParams] = None,
    _prep: Optional[_Prepared] = None,
) -> StageResult:
    """Register against every cloud stored under ``key`` and keep the best pair.

    ``role`` selects the action formula: ``pick`` or ``place``.
    """
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}, got {role!r}")
    clouds = store.lookup(key)
    if not clouds:
        raise UnknownTaskError(key)
    params = params or RegistrationParams()
    prep = _prep or _Prepared(params)
    cands = tuple(infer_pair(p_a_hat, p_b_hat, c, params, i, prep) for i, c in enumerate(clouds))
    best = select_best(cands)
    action = pick_action(best) if role == "pick" else place_action(best)
    return StageResult(key, role, action, best, cands)


@dataclass(frozen=True, eq=False)
class KeyframeAction:
    """The pick, preplace and place actions of one step plus their evidence."""

    pick: RigidTransform
    preplace: RigidTransform
    place: RigidTransform
    evidence: dict = field(default_factory=dict)
    task: str = ""

    @property
    def stages(self) -> dict:
        return {"pick": self.pick, "preplace": self.preplace, "place": self.place}

    def to_record(self, threshold: float) -> dict:
        """Machine-readable record: per stage a row-major 4x4, scores and acceptance."""
        rows = [self.evidence[s].to_record(threshold, s) for s, _ in STAGE_ROLES]
        return {
            "format_version": 1,
            "task": self.task,
            "fitness_threshold": float(threshold),
            "accepted": all(r["accepted"] for r in rows),
            "stages": rows,
        }


def _canonical_gripper():
    from .synth import make_gripper_cloud

    return make_gripper_cloud()


def infer_keyframe(
    store: DemoStore,
    task: str,
    observed_gripper: Optional[PointCloud],
    observed_object: PointCloud,
    observed_placement: PointCloud,
    params: Optional[RegistrationParams] = None,
    fitness_threshold: float = 0.0,
) -> KeyframeAction:
    """Infer ``(a_pick, a_preplace, a_place)`` for ``task``.

    The pick stage pairs the gripper with the object; preplace and place pair the
    placement with the object. ``observed_gripper=None`` uses the canonical
    gripper cloud.

    Raises:
        UnknownTaskError: a stage key is missing from the store.
        LowConfidenceError: some stage's selected pair averages below
            ``fitness_threshold``; the full result is attached as ``.action``.
    """
    for stage, _ in STAGE_ROLES:
        if stage_key(task, stage) not in store:
            raise UnknownTaskError(stage_key(task, stage))
    params = params or RegistrationParams()
    gripper = observed_gripper if observed_gripper is not None else _canonical_gripper()
    prep = _Prepared(params)
    results = {}
    for stage, role in STAGE_ROLES:
        p_a = gripper if role == "pick" else observed_placement
        results[stage] = infer_stage(store, stage_key(task, stage), role, p_a, observed_object, params, prep)
    action = KeyframeAction(
        results["pick"].action, results["preplace"].action, results["place"].action, results, task
    )
    for stage, _ in STAGE_ROLES:
        ev = results[stage].evidence
        if ev.average_fitness < fitness_threshold:
            raise LowConfidenceError(stage_key(task, stage), (ev.s_a, ev.s_b), fitness_threshold, action)
    return action


@dataclass(frozen=True, eq=False)
class SequenceResult:
    """Stages completed in order, plus the rejection that stopped the sequence, if any."""

    steps: tuple
    rejection: Optional[LowConfidenceError] = None

    @property
    def actions(self) -> list:
        return [s.action for s in self.steps]

    @property
    def completed(self) -> bool:
        return self.rejection is None


def infer_sequence(
    store: DemoStore,
    stage_keys: Sequence[tuple],
    observations: Sequence[tuple],
    params: Optional[RegistrationParams] = None,
    fitness_threshold: float = 0.0,
) -> SequenceResult:
    """Infer a chain of stages, each ``(key, role)`` with observation ``(P_a, P_b)``.

    Articulated parts are just place-role stages between two parts. The chain
    stops at the first stage scoring below the threshold; earlier stages are kept.
    """
    if len(stage_keys) != len(observations):
        raise ValueError("one (P_a, P_b) observation is needed per stage")
    for key, role in stage_keys:
        if key not in store:
            raise UnknownTaskError(key)
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {role!r}")
    params = params or RegistrationParams()
    prep = _Prepared(params)
    steps = []
    for (key, role), (p_a, p_b) in zip(stage_keys, observations):
        if p_a is None:
            p_a = _canonical_gripper()
        res = infer_stage(store, key, role, p_a, p_b, params, prep)
        ev = res.evidence
        if ev.average_fitness < fitness_threshold:
            return SequenceResult(tuple(steps), LowConfidenceError(key, (ev.s_a, ev.s_b), fitness_threshold, res))
        steps.append(res)
    return SequenceResult(tuple(steps))
