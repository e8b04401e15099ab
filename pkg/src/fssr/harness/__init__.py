"""Training loops, experiment records, reports and the selftest suite."""

from .config import CompositeWeights, TrainConfig
from .records import EvaluationReport, ExperimentRecord
from .training import (
    TrainOutcome,
    episodic_train,
    limited_samples_sweep,
    topk_accuracy,
    train_classifier,
    transfer_finetune,
)

__all__ = [
    "CompositeWeights", "EvaluationReport", "ExperimentRecord", "TrainConfig", "TrainOutcome",
    "episodic_train", "limited_samples_sweep", "topk_accuracy", "train_classifier", "transfer_finetune",
]
