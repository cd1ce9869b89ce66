"""Training-free selective test-time inference for click-through-rate models."""

__version__ = "0.1.0"

from .aggregate import AggregationResult, aggregate
from .calib import CalibrationProfile, calibrate, compute_field_thresholds, compute_gamma, load_profile, save_profile
from .data import MASKED, Corpus, FeatureVector, read_tsv, write_tsv
from .engine import Engine, EngineConfig, InferenceTrace, infer, infer_batch, read_traces, write_traces
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    IncompatibleSketchError,
    InvariantError,
    ParameterError,
    SchemaError,
    SelinferError,
)
from .explore import build_path, explore
from .metrics import EvalReport, auc, logloss, report, spearman
from .model import AttributionVector, Backbone, TrainConfig, forward, input_gradients, load_model, save_model, train
from .refine import composite_scores, filter_fields, refined_prediction
from .sketch import FrequencySketch, load_sketch, merge, save_sketch
from .synth import SynthSpec, generate
from .uncertain import freq_confidence, model_confidence, path_budget, uncertainty

__all__ = [name for name in dir() if not name.startswith("_")]
