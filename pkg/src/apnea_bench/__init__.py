"""Respiratory-event detection from a single effort-belt signal."""
from .errors import (ApneaBenchError, ConfigError, DataError, NumericError)
from .evaluate import ConfusionMatrix, RobustLinearRegression, metrics, robust_fit, roc_prc
from .neuralnet import ArchSpec, WaveNetClassifier, receptive_field
from .postprocess import EventSmoother, SmoothingConfig, match_events, smooth
from .preprocess import EffortBeltPreprocessor, PreprocessConfig
from .record_io import AnnotationEvent, EventClass, SignalRecord, load_record, save_record
from .synthgen import SynthConfig, generate, make_corpus
from .trainer import ApneaDetector, BoostCascade, CascadeConfig, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "AnnotationEvent", "ApneaBenchError", "ApneaDetector", "ArchSpec", "BoostCascade",
    "CascadeConfig", "ConfigError", "ConfusionMatrix", "DataError", "EffortBeltPreprocessor",
    "EventClass", "EventSmoother", "NumericError", "PreprocessConfig", "RobustLinearRegression",
    "SignalRecord", "SmoothingConfig", "SynthConfig", "TrainConfig", "WaveNetClassifier",
    "generate", "load_record", "make_corpus", "match_events", "metrics", "receptive_field",
    "robust_fit", "roc_prc", "save_record", "smooth",
]
