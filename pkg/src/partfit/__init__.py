"""Body-model fitting and regression from part-segmentation grids."""
from .body_model import BodyModel, generate_desk_model, skin, posed_joints
from .camera import Camera, default_camera, project
from .fitter import FitConfig, fit, fit_batch
from .losses import AnnotationMask, LossWeights, Targets
from .metrics import MetricsReport, e_joints, e_quat, pckh, procrustes_align
from .regressor import RegressorNet, TrainConfig, supervision_sweep, train
from .synth import Dataset, PartSegGrid, build_dataset

__version__ = '0.1.0'
