"""Run configuration: one flat JSON object, every module default overridable.

Unknown keys are rejected by name; numeric fields are validated by building
the module-level config objects they feed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .classifier import TrainConfig
from .explainer import ExplainConfig
from .imaging import ENCODERS
from .predictor import RecurrentConfig
from .synth import SynthParams

CFG_ENCODERS = ("prediction_bitmap",)
API_ENCODERS = tuple(ENCODERS)


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key, msg):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass
class RunConfig:
    seed: int = 7
    kind: str = "cfg"  # "cfg" or "api"
    # paths, relative ones resolved against the output directory
    corpus_dir: str = "corpus"
    models_dir: str = "models"
    # synthgen
    n_benign: int = 200
    n_malicious: int = 200
    n_reference: int = 200
    trace_len: int = 4096
    vocab_size: int = 512
    anomaly_len: int = 300
    markov_order: int = 2
    p_dominant: float = 0.7
    # seq-predictor
    predictor: str = "ngram"  # or "recurrent"
    predictor_data: str = "reference"  # or "benign_split"
    window_len: int = 16
    context_len: int = 4
    threshold_margin: float = 0.02
    rnn_hidden: int = 32
    rnn_embed: int = 16
    rnn_lr: float = 0.01
    rnn_epochs: int = 3
    # imaging
    encoders: list = field(default_factory=list)  # empty: every encoder of the kind
    bitmap_width: int = 8
    sequence_width: int = 64
    cap: int = 65536
    # classifier
    split_ratio: float = 0.8
    max_epochs: int = 50
    patience: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    validation_fraction: float = 0.2
    hidden: int = 128
    # explainer
    cell: int = 8
    n_samples: int = 1000
    p_keep: float = 0.5
    sigma: float = 0.25
    lam: float = 1.0
    top_k: int = 5
    # black-box classifier command for explain/validate (batch-file protocol); empty: trained MLP
    external_classifier: str = ""
    # fidelity
    tau: float = 0.2
    deletion_steps: int = 3
    max_explain: int = 0  # malicious test samples validated; 0 = all

    # -- derived module configs ------------------------------------------

    def synth_params(self) -> SynthParams:
        return SynthParams(
            n_benign=self.n_benign,
            n_malicious=self.n_malicious,
            trace_len=self.trace_len,
            vocab_size=self.vocab_size,
            anomaly_len=self.anomaly_len,
            markov_order=self.markov_order,
            seed=self.seed,
            p_dominant=self.p_dominant,
            n_reference=self.n_reference,
        )

    def recurrent_config(self) -> RecurrentConfig:
        return RecurrentConfig(
            hidden=self.rnn_hidden,
            embed=self.rnn_embed,
            lr=self.rnn_lr,
            epochs=self.rnn_epochs,
            window_len=self.window_len,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            max_epochs=self.max_epochs,
            patience=self.patience,
            lr=self.lr,
            momentum=self.momentum,
            batch_size=self.batch_size,
            validation_fraction=self.validation_fraction,
            hidden=self.hidden,
            seed=self.seed,
        )

    def explain_config(self) -> ExplainConfig:
        return ExplainConfig(
            cell=self.cell,
            n_samples=self.n_samples,
            p_keep=self.p_keep,
            sigma=self.sigma,
            lam=self.lam,
            top_k=self.top_k,
            seed=self.seed,
        )

    def resolved_encoders(self):
        return list(self.encoders) or list(CFG_ENCODERS if self.kind == "cfg" else API_ENCODERS)

    def to_json(self):
        d = asdict(self)
        d["encoders"] = self.resolved_encoders()
        return d

    def validate(self):
        if self.kind not in ("cfg", "api"):
            raise ConfigError("kind", f"must be 'cfg' or 'api', got {self.kind!r}")
        if self.predictor not in ("ngram", "recurrent"):
            raise ConfigError("predictor", f"must be 'ngram' or 'recurrent', got {self.predictor!r}")
        if self.predictor_data not in ("reference", "benign_split"):
            raise ConfigError("predictor_data", f"must be 'reference' or 'benign_split', got {self.predictor_data!r}")
        allowed = CFG_ENCODERS if self.kind == "cfg" else API_ENCODERS
        for e in self.encoders:
            if e not in allowed:
                raise ConfigError("encoders", f"{e!r} is not an encoder for {self.kind} corpora")
        checks = {
            "window_len": self.window_len >= 2,
            "context_len": 1 <= self.context_len <= self.window_len,
            "threshold_margin": 0.0 <= self.threshold_margin < 1.0,
            "bitmap_width": self.bitmap_width >= 1,
            "sequence_width": self.sequence_width >= 1,
            "cap": self.cap >= 1,
            "split_ratio": 0.0 < self.split_ratio < 1.0,
            "tau": 0.0 <= self.tau <= 1.0,
            "deletion_steps": self.deletion_steps >= 1,
            "max_explain": self.max_explain >= 0,
            "n_benign": self.n_benign >= 2,
            "n_malicious": self.n_malicious >= 2,
            "n_reference": self.n_reference >= 0,
            "vocab_size": self.vocab_size >= 4,
            "trace_len": self.trace_len > self.window_len,
            "anomaly_len": 1 <= self.anomaly_len < self.trace_len,
            "markov_order": self.markov_order >= 1,
            "p_dominant": 0.0 <= self.p_dominant <= 1.0,
            "rnn_hidden": self.rnn_hidden >= 1,
            "rnn_embed": self.rnn_embed >= 1,
            "rnn_lr": self.rnn_lr > 0,
            "rnn_epochs": self.rnn_epochs >= 1,
            "max_epochs": self.max_epochs >= 1,
            "patience": self.patience >= 1,
            "lr": self.lr > 0,
            "momentum": 0.0 <= self.momentum < 1.0,
            "batch_size": self.batch_size >= 1,
            "validation_fraction": 0.0 < self.validation_fraction < 1.0,
            "hidden": self.hidden >= 1,
            "cell": self.cell >= 1,
            "n_samples": self.n_samples >= 3,
            "p_keep": 0.0 <= self.p_keep <= 1.0,
            "sigma": self.sigma > 0,
            "lam": self.lam >= 0,
            "top_k": self.top_k >= 1,
        }
        for key, ok in checks.items():
            if not ok:
                raise ConfigError(key, f"value {getattr(self, key)!r} out of range")
        builders = {
            "synth": self.synth_params,
            "classifier": self.train_config,
            "explainer": self.explain_config,
        }
        if self.predictor == "recurrent":
            builders["recurrent predictor"] = self.recurrent_config
        for what, build in builders.items():
            try:
                build()
            except ValueError as exc:
                raise ConfigError(what, str(exc)) from None
        return self


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key, value):
    default = getattr(RunConfig(), key)
    if isinstance(default, bool) or default is None:
        return value
    try:
        if isinstance(default, int) and not isinstance(value, bool):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float) and not isinstance(value, bool):
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise ValueError
            return value
        if isinstance(default, list):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v]
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise ValueError
            return list(value)
    except (TypeError, ValueError):
        pass
    raise ConfigError(key, f"expected {type(default).__name__}, got {value!r}")


def merge(base: dict, overrides: dict) -> dict:
    for key in overrides:
        if key not in _FIELDS:
            raise ConfigError(key, "unknown config key")
    return {**base, **overrides}


def parse_override(text):
    """``key=value`` with a JSON value, falling back to the raw string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(text, "overrides look like key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides=None) -> RunConfig:
    """Config file (optional) with flag overrides on top; flags win."""
    values = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"invalid JSON: {exc.msg} (line {exc.lineno})") from None
        if not isinstance(values, dict):
            raise ConfigError(str(path), "config must be a JSON object")
    values = merge(merge({}, values), dict(overrides or {}))
    return RunConfig(**{k: _coerce(k, v) for k, v in values.items()}).validate()
