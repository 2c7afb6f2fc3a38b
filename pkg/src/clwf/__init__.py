"""Continual learning on synthetic tasks with factorized weights and elastic weight consolidation."""

from .errors import ClwfError
from .ewc import EwcSchedule, EwcState, FisherDiagonal, accumulate_fisher, estimate_fisher, ewc_penalty, important_fraction
from .factorized import FactorizedLinear, FactorSet, param_overhead
from .metrics import EvalReport, degradation, emit, evaluate, group_average
from .model import ModelConfig, ToyEncoderClassifier
from .tasks import GenConfig, TaskSuite, generate_suite, load_task, save_task
from .trainer import Strategy, TrainPlan, TrainState, continual_step, train_initial

__all__ = [
    "ClwfError",
    "EvalReport",
    "EwcSchedule",
    "EwcState",
    "FactorSet",
    "FactorizedLinear",
    "FisherDiagonal",
    "GenConfig",
    "ModelConfig",
    "Strategy",
    "TaskSuite",
    "ToyEncoderClassifier",
    "TrainPlan",
    "TrainState",
    "accumulate_fisher",
    "continual_step",
    "degradation",
    "emit",
    "estimate_fisher",
    "evaluate",
    "ewc_penalty",
    "generate_suite",
    "group_average",
    "important_fraction",
    "load_task",
    "param_overhead",
    "save_task",
    "train_initial",
]
