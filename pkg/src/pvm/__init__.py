"""Self-supervised predictive vision on a simulated pan-tilt rig.

A hierarchy of small recurrent perceptrons learns to predict its own
video input; a foveated retina concentrates units where the gaze rests;
an error-driven controller saccades toward unpredicted regions; and the
camera's known rotation is folded into the prediction so the error
reflects the scene, not self-motion.
"""

from .numerics import (MlpGradients, MlpParams, init_mlp, mlp_backward,
                       mlp_forward, sgd_step, sigmoid)
from .unit import PvmUnit, derive_layers
from .hierarchy import (ErrorMap, FoveaSpec, Hierarchy, HierarchySpec,
                        NumericError, StepResult, apply_fovea, build_hierarchy)
from .motion import (CameraIntrinsics, PoseAngles, camera_transform,
                     compensate_prediction, rot_x, rot_y, warp_frame)
from .saccade import (SaccadeParams, SaccadeState, gaze_from_pose,
                      gaze_to_pose, max_error_window, saccade_step)
from .simenv import (DatasetRecord, PanoramaScene, Trajectory, blob_panorama,
                     checkerboard_panorama, gradient_panorama,
                     make_trajectories, read_dataset, record_dataset, render,
                     two_object_panorama, write_ppm, read_ppm)
from .harness import (Checkpoint, ConfigError, DataError, RunConfig, demo,
                      evaluate, load_checkpoint, read_metrics,
                      restore_hierarchy, save_checkpoint, smooth_curve, train)

__version__ = "0.1.0"
