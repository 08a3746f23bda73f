"""Toy-scale latent visual reasoning: curriculum SFT, latent-aware RL and a synthetic geometry corpus."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .estimator import LatentGeoSolver
from .latent_model import LatentTransformer, ModelConfig, generate
from .rewards import RewardBreakdown, RewardConfig, Response, total_reward
from .taskgen import TaskInstance, generate_task, make_dataset, solve_oracle

__all__ = [
    "CheckpointError", "ConfigError", "LatentGeoSolver", "LatentTransformer", "ModelConfig",
    "RewardBreakdown", "RewardConfig", "Response", "RunConfig", "TaskInstance", "generate",
    "generate_task", "load_checkpoint", "make_dataset", "save_checkpoint", "solve_oracle",
    "total_reward",
]
__version__ = "0.1.0"
