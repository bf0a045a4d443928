"""Predictive reinforcement learning on toy games.

A supervised model (perception encoder, residual recurrent transition,
valuation head) predicts cumulative score/death probabilities for candidate
control sequences; a random-shooting planner acts by scoring those
candidates; an iterative loop alternates generating play data and training
the model offline.
"""

from .autograd import Tensor, backward, no_grad
from .envs import ControlVector, Env, encode_control, make_env
from .model import Model, ModelConfig, StepPrediction, model_loss
from .optim import OptimizerConfig, Parameter, adam_step
from .planner import PlannerConfig, RandomShootingPlanner
from .store import Dataset, TrainingCase, load_checkpoint, save_checkpoint
from .trainer import ExperimentConfig, run_experiment

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "no_grad",
    "ControlVector", "Env", "encode_control", "make_env",
    "Model", "ModelConfig", "StepPrediction", "model_loss",
    "OptimizerConfig", "Parameter", "adam_step",
    "PlannerConfig", "RandomShootingPlanner",
    "Dataset", "TrainingCase", "load_checkpoint", "save_checkpoint",
    "ExperimentConfig", "run_experiment",
    "__version__",
]
