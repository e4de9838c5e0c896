"""Mesh-rigged 3D gaussian splat avatars with adaptive offset regularisation,
part-wise mouth deformation and a NumPy software rasteriser."""

from .aps import FaceSetAssignment, assign_sets, part_distance, run_aps
from .errors import SplatRigError
from .geometry import TriMesh, compute_face_frame, to_polar
from .losses import FaceSet, RegThresholds, loss_angle, loss_p, loss_reg, loss_rgb, ssim
from .mouth import TeethTrajectory, build_mouth_structure, pseudo_center
from .renderer import Camera, render
from .rig import BlendRig, RigParams, SceneSpec, evaluate_rig, generate_scene, preset_spec
from .splats import SplatSet, initialize_on_mesh, to_global
from .trainer import TrainConfig, animate, fit, train_step

__version__ = "0.1.0"
