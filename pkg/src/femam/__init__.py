"""Federated multi-level additive modeling on desk-scale synthetic data."""

from femam.model import PredictorSpec, Batch, init_params, predict_additive, loss_and_grad
from femam.engine import EngineConfig, run_femam
from femam.records import RunRecord, PRUNED


__all__ = [
    "PredictorSpec",
    "Batch",
    "init_params",
    "predict_additive",
    "loss_and_grad",
    "EngineConfig",
    "run_femam",
    "RunRecord",
    "PRUNED",
]
