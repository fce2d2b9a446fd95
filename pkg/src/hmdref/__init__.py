"""Referencing a robot base in head-mounted-display spatial maps.

Three pipelines register a robot model cloud into a scene cloud: seed-guided
ICP (:func:`reference_from_seed`), sliding-box detection followed by
four-start ICP (:func:`detect_robot`) and plane removal + clustering + 4PCS
(:func:`segment_then_register`). Hot kernels run under numba; set
``HMDREF_NO_NUMBA=1`` for the pure-numpy path.
"""

from ._backend import backend, backend_name, set_backend, use_numba
from .cloud_io import SamplingConfig, TriangleMesh, load_cloud, load_mesh, sample_mesh, save_cloud, save_mesh
from .coarse4pcs import CoarseResult, FourPcsConfig, register_4pcs, segment_then_register
from .errors import (
    AllStartsFailed,
    BadFrame,
    DegenerateMesh,
    EmptyCloud,
    NoCandidateBox,
    NoCongruentBase,
    NoCorrespondences,
    ParseError,
    RadiusTooSmall,
    ReferencingError,
    SegmentationFailed,
    TooFewPoints,
)
from .geom import Aabb, PointCloud, RigidTransform, pose_error
from .icp import IcpConfig, RegistrationResult, SeedPose, register_icp, register_icp_4rot
from .kdtree import KdTree, rms_closest_point_mm
from .pipeline import SeedPipelineConfig, reference_from_seed
from .preprocess import (
    ClusterConfig,
    CropConfig,
    MlsConfig,
    PlaneRemovalConfig,
    Upsampling,
    euclidean_cluster,
    mls_smooth,
    remove_planes,
    sphere_crop,
    voxel_downsample,
)
from .scene_synth import SceneSpec, robot_model_cloud, synthesize_scene
from .slidebox import DetectionConfig, detect_robot

__version__ = "0.1.0"
