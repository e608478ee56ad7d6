"""Explaining trace-image malware classifiers.

Execution traces (control-flow BBIDs or API calls) are turned into images,
a small classifier labels them, and local surrogate explanations of its
decisions are mapped back onto the trace content that caused them.
"""

__version__ = "0.1.0"

from .classifier import ClassifierModel, ExternalClassifier, load_model, predict, save_model, train_classifier
from .config import ConfigError, RunConfig, load_config
from .explainer import ExplainConfig, Explanation, explain, fit_surrogate, render_overlay, segment_grid
from .fidelity import (
    backmap,
    corpus_consistency,
    deletion_curve,
    dispersion,
    extract_signature,
    region_recovery,
)
from .imaging import (
    ImageBuffer,
    PixelProvenanceMap,
    encode_api_existence,
    encode_api_frequency,
    encode_api_sequence,
    encode_prediction_bitmap,
    read_image,
    write_image,
)
from .predictor import evaluate_trace, label_trace, train_ngram, train_recurrent
from .synth import SynthParams, gen_api_corpus, gen_cfg_corpus
from .traces import ApiTrace, ControlFlowTrace, Corpus, load_corpus

__all__ = [
    "__version__",
    "ApiTrace",
    "ClassifierModel",
    "ConfigError",
    "ControlFlowTrace",
    "Corpus",
    "ExplainConfig",
    "Explanation",
    "ExternalClassifier",
    "ImageBuffer",
    "PixelProvenanceMap",
    "RunConfig",
    "SynthParams",
    "backmap",
    "corpus_consistency",
    "deletion_curve",
    "dispersion",
    "encode_api_existence",
    "encode_api_frequency",
    "encode_api_sequence",
    "encode_prediction_bitmap",
    "evaluate_trace",
    "explain",
    "extract_signature",
    "fit_surrogate",
    "gen_api_corpus",
    "gen_cfg_corpus",
    "label_trace",
    "load_config",
    "load_corpus",
    "load_model",
    "predict",
    "read_image",
    "region_recovery",
    "render_overlay",
    "save_model",
    "segment_grid",
    "train_classifier",
    "train_ngram",
    "train_recurrent",
    "write_image",
]
