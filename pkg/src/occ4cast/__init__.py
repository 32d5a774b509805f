"""Trajectory-conditioned 4D semantic occupancy forecasting.

Sparse point anchors attend to past multi-camera features and a future ego
trajectory through a fully attention-based refinement stack, are supervised
with Chamfer-L1 + focal losses, and are scored with voxel IoU / mIoU and
ray-level IoU.  Ships with a deterministic synthetic driving-world generator
for desk-scale experiments.
"""

__version__ = "0.1.0"

from .anchors import (AnchorConfig, AnchorState, DecodedFrame, anchor_statistics,
                      decode_anchors, init_anchor_state)
from .classes import CLASS_NAMES, FREE, NUM_CLASSES
from .evaluator import (MetricReport, ModelForecaster, OracleForecaster, evaluate,
                        geometric_iou, ray_iou, semantic_miou, voxelize_prediction)
from .fusion import ForecastOutput, OccupancyWorldModel, WorldModelConfig
from .geometry import CameraCalib, Pose, compose, inverse, project_points, relative_pose
from .grid import OccupancyGrid, grid_to_points, read_grid, write_grid
from .losses import LossBreakdown, chamfer_l1, focal_loss, match_labels, total_loss
from .sequence import SensorFrame, SequenceSample, load_dataset, load_occ3d_sample, save_dataset
from .synthetic import SyntheticWorldSpec, generate_dataset, generate_synthetic_sequence
from .trainer import Checkpoint, TrainConfig, Trainer, fit, sample_horizon
from .trajectory import TrajectoryEncoder, TrajectoryWaypoint, time_embedding
