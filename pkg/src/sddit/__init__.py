"""Diffusion transformer training with a decoupled self-supervised discrimination objective."""

from .config import RunConfig, parse_config
from .edm import NoiseSpec, heun_sample, sampling_sigmas
from .network import ModelConfig, StudentBranch, TeacherBranch
from .training import TrainState, init_state, load_checkpoint, run_training, save_checkpoint, train_step

__all__ = [
    "ModelConfig",
    "NoiseSpec",
    "RunConfig",
    "StudentBranch",
    "TeacherBranch",
    "TrainState",
    "heun_sample",
    "init_state",
    "load_checkpoint",
    "parse_config",
    "run_training",
    "sampling_sigmas",
    "save_checkpoint",
    "train_step",
]
