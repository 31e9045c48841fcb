"""Topologically consistent face meshes from per-view point maps and UV images."""

__version__ = "0.1.0"

from .cameras import (
    BehindCameraError,
    CameraIntrinsics,
    CameraPose,
    project,
    project_points,
)
from .correspondence import (
    CorrespondenceConfig,
    TrackSet,
    UVGridIndex,
    build_tracks,
    build_uv_index,
    compute_visibility,
    lookup_tracks,
)
from .evaluation import (
    ChamferReport,
    SimilarityTransform,
    TriangleBVH,
    chamfer_stats,
    rigid_align,
    sample_surface,
)
from .fusion import TopologizedCloud, connect_mesh, fuse_initial
from .mesh import (
    FaceMesh,
    TemplateMesh,
    laplacian_all,
    laplacian_vector,
    make_icosphere,
    precompute_neighborhoods,
)
from .morphable import (
    FitConfig,
    LinearShapeModel,
    fit,
    load_model,
    make_random_model,
    save_model,
    synthesize,
)
from .synth import (
    SceneSpec,
    SyntheticScene,
    generate,
    halfpixel_bound,
    perturb_cameras,
    pixel_bound,
    write_scene,
)
from .topba import (
    BAState,
    NoValidTracksError,
    ResidualSystem,
    SolveReport,
    SolverConfig,
    build_system,
    evaluate,
    initial_state,
    jacobian,
    solve,
)
