"""Training-free pick-and-place keyframe policy built on point-cloud registration.

Demonstrations are stored as combined point clouds keyed by a task description.
At test time the observed clouds are registered to every stored cloud under the
key, and the keyframe actions follow in closed form from the two registrations.
"""

from .demo_store import (
    DemoSample,
    DemoStore,
    KeyframeDemo,
    build_combined,
    load_store,
    lookup,
    samples_from_keyframes,
    save_store,
    stage_key,
    store,
)
from .errors import (
    DegenerateCorrespondencesError,
    InsufficientPointsError,
    InvalidKeyError,
    InvalidParameterError,
    LowConfidenceError,
    NoCandidatesError,
    PlyFormatError,
    PolicyError,
    PreconditionError,
    UnknownTaskError,
)
from .features import FeatureSet, compute_fpfh, match_features
from .geometry import (
    DEFAULT_VOXEL_SIZE,
    PointCloud,
    RigidTransform,
    SpatialIndex,
    compose,
    estimate_normals,
    inverse,
    merge_clouds,
    nearest_neighbors,
    transform_cloud,
    voxel_downsample,
)
from .plyio import read_ply, write_ply
from .policy import (
    KeyframeAction,
    PairRegistration,
    SequenceResult,
    StageResult,
    infer_keyframe,
    infer_pair,
    infer_sequence,
    infer_stage,
    pick_action,
    place_action,
    select_best,
)
from .registration import (
    RegistrationParams,
    RegistrationResult,
    colored_icp,
    estimate_transform_svd,
    fitness_score,
    prepare,
    ransac_register,
    register,
)

__version__ = "0.1.0"
