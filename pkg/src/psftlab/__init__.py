"""Desk-scale lab for proximal supervised fine-tuning.

Tiny autoregressive policies on a numpy reverse-mode engine, exact SFT / PSFT /
SFT-KL / PPO-clip / GRPO / DPO objectives, synthetic two-domain tasks with a
known teacher, and the training loops and diagnostics that tie them together.
"""

from psftlab.autodiff import Graph, Tensor, backward, no_grad
from psftlab.kernels import BACKEND as KERNEL_BACKEND
from psftlab.objectives import ObjectiveConfig
from psftlab.policy import Policy, PolicyConfig, TokenBatch, load_checkpoint, save_checkpoint
from psftlab.trainer import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "Graph", "Tensor", "backward", "no_grad", "KERNEL_BACKEND", "ObjectiveConfig", "Policy",
    "PolicyConfig", "TokenBatch", "load_checkpoint", "save_checkpoint", "TrainConfig",
]
