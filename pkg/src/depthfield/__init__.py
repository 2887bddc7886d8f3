"""Anchor-guided depth correction and dense geometry initialization.

The pipeline ingests per-view multi-view and monocular depth predictions
plus a sparse calibrated point cloud, aligns and refines the depths with a
small learned correction field supervised only by the sparse anchors,
filters the back-projected dense cloud by cycle reprojection error, and
fuses the corrected depths into a TSDF mesh.
"""

from .affine import AffineParams, AnchorTriplet, apply_affine, extract_triplets, fit_affine
from .coordnet import (
    AdamWState,
    LrSchedule,
    MlpParams,
    PosEncConfig,
    cosine_warm_restart_lr,
    positional_encode,
)
from .dense import (
    DensePointCloud,
    build_dense_cloud,
    compute_cycle_errors,
    cycle_reprojection_error,
    filter_reliable,
    select_neighbors,
    voxel_downsample,
)
from .field import (
    CorrectionField,
    SampleSet,
    TrainConfig,
    build_training_set,
    correct_depth_maps,
    correct_depth_pair,
    finetune_view,
    sparse_l1_loss,
    train_field,
    train_global,
)
from .fusion import (
    EvalReport,
    TsdfVolume,
    chamfer_distance,
    evaluate_geometry,
    extract_mesh,
    fscore,
    tsdf_integrate,
)
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    View,
    backproject,
    normalize_pixel,
    project,
)
from .scene_io import (
    DepthMap,
    SparseModel,
    TriangleMesh,
    parse_colmap_model,
    read_pfm,
    read_ply_points,
    write_colmap_model,
    write_pfm,
    write_ply_mesh,
    write_ply_points,
)
from .synth import (
    CorruptionSpec,
    SceneSpec,
    corrupt_depths,
    depth_error_report,
    generate_scene,
)

__version__ = "0.1.0"
