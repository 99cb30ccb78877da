"""Multichannel conditional denoising diffusion for unsupervised anomaly segmentation."""

from .data import PhantomSpec, VolumeRecord, generate_phantom_dataset, normalize_percentile, preprocess_volume
from .estimator import MCDDPMDetector
from .experiment import ExperimentConfig, run_phantom_experiment, sweep
from .evaluation import EvalReport, auprc, dice, reconstruction_error
from .inference import reconstruct_slice, reconstruct_volume, residual_map
from .model import MCDDPMNet, ModelConfig, build_model
from .postprocessing import brain_mask, erode, median_filter_3d, threshold_binarize
from .schedule import NoiseSchedule, make_linear_schedule, q_sample_full, q_sample_patched, sample_patch_mask
from .training import TrainConfig, dual_loss, fit, training_step

__version__ = "0.1.0"
