"""Context-conditional normalizing flows with additive generalist/specialist decoupling."""

from .checkpoint import FingerprintMismatch, load_checkpoint, save_checkpoint
from .encoders import ContextSpec, VarSpec
from .flowmodel import FlowConfig, FlowModel, attach_specialist, build, preset
from .trainer import MetricsReport, TrainConfig, evaluate, fit, lr_at

__all__ = [
    "ContextSpec",
    "FingerprintMismatch",
    "FlowConfig",
    "FlowModel",
    "MetricsReport",
    "TrainConfig",
    "VarSpec",
    "attach_specialist",
    "build",
    "evaluate",
    "fit",
    "load_checkpoint",
    "lr_at",
    "preset",
    "save_checkpoint",
]
