"""Synthetic corpus, toy teacher/student model and the training loop."""

from .data import SyntheticScene, generate_corpus, load_corpus, save_corpus
from .model import ModelState, forward_student, forward_teacher, infer, init_state
from .train import TrainConfig, TrainResult, evaluate, new_state, train_loop, train_step

__all__ = [
    "ModelState",
    "SyntheticScene",
    "TrainConfig",
    "TrainResult",
    "evaluate",
    "forward_student",
    "forward_teacher",
    "generate_corpus",
    "infer",
    "init_state",
    "load_corpus",
    "new_state",
    "save_corpus",
    "train_loop",
    "train_step",
]
