"""Metrics, optimizer, checkpoints, training loop and CLI."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, TrainConfig, load_config, parse_config
from .metrics import MetricsReport, psnr, rgb_to_lab, rmse_lab, ssim
from .optim import AdamState, adam_step
from .trainer import ablate, evaluate, train
