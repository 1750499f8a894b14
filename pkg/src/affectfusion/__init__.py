"""Trimodal utterance-level arousal/valence regression.

Visual frame sequences, utterance audio vectors and lexicon text features
feed per-modality branches that are fused early into one decision head.
"""
from .models import FeatureBundle, Model, ModelSpec, build_model, predict, predict_batch
from .objectives import MetricsReport, ccc, evaluate_report, mse, pearson

__version__ = "0.1.0"

__all__ = [
    "FeatureBundle", "Model", "ModelSpec", "build_model", "predict", "predict_batch",
    "MetricsReport", "ccc", "evaluate_report", "mse", "pearson",
]
