"""Dense depth-fusion reconstruction and evaluation toolkit.

Uncertainty-weighted TSDF fusion of per-frame depth maps with marching-cubes
surface extraction, reconstruction-to-reference registration (scale recovery,
RANSAC pose fit, reprojection-correspondence ICP), agreement metrics
(point-to-mesh, target registration error), and a synthetic cavity phantom
generator for controlled end-to-end evaluation.
"""

import numba as _numba

# TBB on this image is too old for numba; prefer OpenMP before the parallel
# runtime initializes to keep imports warning-free.
_numba.config.THREADING_LAYER = "omp"

__version__ = "0.1.0"

from .fusion import (  # noqa: E402
    DepthObservation,
    FusionParams,
    NoSurface,
    NoValidObservations,
    TsdfVolume,
    VolumeSpec,
    extract_surface,
    fuse_sequence,
    integrate,
    truncated_distance,
)
from .geometry import (  # noqa: E402
    BehindCamera,
    CameraIntrinsics,
    NonPositiveDepth,
    RigidTransform,
    SimilarityTransform,
    backproject,
    chain_tracker_to_camera,
    compose,
    invert,
    project,
)
from .mesh import EmptyMesh, TriangleMesh, apply_transform  # noqa: E402
from .metrics import (  # noqa: E402
    EmptyInput,
    ErrorStats,
    PerPointErrors,
    evaluation_report,
    point_to_mesh,
    target_registration_error,
)
from .phantom import (  # noqa: E402
    ClearanceViolation,
    DepthNoise,
    InvalidSpec,
    NoiseSpec,
    PhantomSpec,
    PoseNoise,
    TrajectorySpec,
    generate_cavity_mesh,
    generate_trajectory,
    perturb_depths,
    perturb_poses,
    render_dataset,
)
from .raycast import (  # noqa: E402
    DepthMap,
    MeshAccelerator,
    StrideTooLarge,
    UncertaintyMap,
    build_accelerator,
    render_depth,
    reproject_keypoints,
    sample_grid_keypoints,
    set_threads,
)
from .registration import (  # noqa: E402
    ConsensusTooSmall,
    CorrespondenceSet,
    DegenerateGeometry,
    DegenerateTrajectory,
    IcpParams,
    NoCorrespondences,
    RansacParams,
    RegistrationResult,
    TooFewCorrespondences,
    TrajectoryPair,
    build_correspondences,
    estimate_scale,
    pose_based_rigid,
    refine_icp,
    register_reconstruction,
)
