"""Desk-scale diffusion model used to exercise the quantization pipeline end to end."""

from .data import DATASETS, GMM8, TWO_MOONS, sample_data
from .model import Schedule, ToyDiffusionModel, pretrain_fp
from .quant import QuantModel, collect_calibration
from .sampler import ddim_sample, energy_distance, temporal_similarity_map
from .train import TrainConfig, TrainState, finetune

__all__ = [
    "DATASETS", "GMM8", "TWO_MOONS", "sample_data", "Schedule", "ToyDiffusionModel", "pretrain_fp",
    "QuantModel", "collect_calibration", "ddim_sample", "energy_distance", "temporal_similarity_map",
    "TrainConfig", "TrainState", "finetune",
]
