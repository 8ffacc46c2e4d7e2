"""Occlusion-aware reconstruction of articulated bodies with skinned 3D
gaussians and a pluggable generative prior."""

from .body import (
    JointTransforms,
    Pose,
    Skeleton,
    canonical_da_pose,
    default_skeleton,
    filter_self_occluded_joints,
    forward_kinematics,
    lbs_transform,
    skinning_transforms,
    template_point_cloud,
)
from .config import TrainingConfig
from .data import Dataset, SceneSpec, generate_scene, load_dataset, save_dataset, simulate_occlusion
from .errors import (
    DataError,
    InvalidInput,
    InvalidState,
    OccSplatError,
    ProtocolError,
    TransportError,
)
from .losses import LossWeights, eval_metrics, l1_masked, l2_mask, perceptual_proxy, ssim
from .pipeline import Frame, StageArtifacts, Trainer, compute_region, init_gaussians
from .prior import (
    DiffusionSchedule,
    MockPriorBackend,
    PoseCondition,
    PriorBackend,
    RemotePriorBackend,
    in_context_inpaint,
    inpaint_rgb,
    make_backend,
    sample_sds_inputs,
    sds_grad,
    segment_person,
)
from .recon import AvatarReconstructor
from .splat import (
    Camera,
    GaussianGrads,
    GaussianSet,
    RasterSettings,
    RenderOutput,
    pose_gaussians,
    project_gaussians,
    render,
    render_backward,
)

__version__ = "0.1.0"
