"""Knowledge distillation of PPG heart-rate models across a capacity sweep."""
from .datapipe import bin_hr, bin_to_bpm, load_dataset, resample, split_participants, synth_ppg, window
from .distill import DistillConfig, Projector, dkd_loss, feature_loss, hard_loss, soft_loss, total_loss
from .models import ModelSpec, build_mlp, build_model, build_resnet, count_params
from .scaling import ScalingFit, benchmark, fit_exponential, predict_mae
from .trainer import TrainConfig, TrainHistory, evaluate_mae, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
