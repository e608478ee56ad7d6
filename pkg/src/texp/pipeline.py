"""End-to-end pipeline steps over an output directory.

Each ``cmd_*`` function reads what earlier steps wrote, writes its own
artifacts, and records a section in ``summary.json`` (plus a plain-text
``summary.txt``). The summary also lists every file under the output
directory so that nothing is left unreferenced.
"""

from __future__ import annotations

import datetime
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import __version__
from ._binfmt import ModelFormatError
from .classifier import (
    ClassifierError,
    ExternalClassifier,
    accuracy as clf_accuracy,
    load_model,
    save_model,
    train_classifier,
)
from .config import RunConfig
from .explainer import explain, render_overlay, segment_grid
from .fidelity import (
    FidelityError,
    FidelityReport,
    backmap,
    corpus_consistency,
    deletion_curve,
    dispersion,
    extract_signature,
    region_recovery,
)
from .imaging import (
    BASELINES,
    ImageFormatError,
    encode_api_existence,
    encode_api_frequency,
    encode_api_sequence,
    encode_prediction_bitmap,
    read_image,
    read_provenance,
    sidecar_path,
    write_image,
)
from .predictor import (
    accuracy as pred_accuracy,
    calibrate_threshold,
    evaluate_trace,
    label_trace,
    load_predictor,
    save_predictor,
    train_ngram,
    train_recurrent,
)
from .synth import (
    gen_api_corpus,
    gen_cfg_corpus,
    gen_reference_traces,
    params_dict,
    read_ground_truth,
    write_synthetic,
)
from .traces import BENIGN, MALICIOUS, Corpus, CorpusError, TraceFormatError, load_corpus, split_corpus, write_corpus

log = logging.getLogger(__name__)

SUMMARY = "summary.json"
SUMMARY_TXT = "summary.txt"

# errors caused by missing or malformed inputs (exit code 2 on the command line)
DATA_ERRORS = (
    CorpusError,
    TraceFormatError,
    ImageFormatError,
    ClassifierError,
    ModelFormatError,
    FidelityError,
    FileNotFoundError,
)


class PipelineError(RuntimeError):
    pass


def _dump(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _median(values):
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(np.median(vals)) if vals else None


class Workspace:
    """Paths of every artifact under one output directory."""

    def __init__(self, out, config: RunConfig):
        self.out = Path(out)
        self.config = config
        self.corpus = self._resolve(config.corpus_dir)
        self.models = self._resolve(config.models_dir)

    def _resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.out / p

    def rel(self, path):
        path = Path(path)
        try:
            return path.relative_to(self.out).as_posix()
        except ValueError:
            return str(path)

    @property
    def manifest(self):
        return self.corpus / "manifest.json"

    @property
    def ground_truth(self):
        return self.corpus / "ground_truth.json"

    @property
    def reference_manifest(self):
        return self.corpus / "reference" / "manifest.json"

    @property
    def predictor(self):
        return self.models / "predictor.bin"

    def classifier(self, encoder):
        return self.models / f"classifier-{encoder}.bin"

    @property
    def split(self):
        return self.out / "split.json"

    def image(self, encoder, sample_id):
        suffix = ".ppm" if encoder == "api_sequence" else ".pgm"
        return self.out / "images" / encoder / f"{sample_id}{suffix}"

    def explanation(self, encoder, sample_id, what):
        names = {"json": ".json", "overlay": ".overlay.ppm", "region": ".region.json"}
        return self.out / "explanations" / encoder / f"{sample_id}{names[what]}"

    def fidelity(self, encoder, sample_id):
        return self.out / "validation" / encoder / f"{sample_id}.json"

    # -- inputs ----------------------------------------------------------

    def require(self, path, step):
        if not Path(path).exists():
            raise PipelineError(f"missing {self.rel(path)}; run `{step}` first")
        return path

    def load_corpus(self) -> Corpus:
        corpus = load_corpus(self.require(self.manifest, "synth"))
        if corpus.kind != self.config.kind:
            raise PipelineError(f"corpus at {self.rel(self.manifest)} is {corpus.kind!r}, config says {self.config.kind!r}")
        return corpus

    def load_split(self):
        doc = json.loads(Path(self.require(self.split, "train-clf")).read_text())
        return doc["train"], doc["test"]

    def load_image(self, encoder, sample_id):
        path = self.require(self.image(encoder, sample_id), "encode")
        return read_image(path), read_provenance(sidecar_path(path))

    # -- summary ---------------------------------------------------------

    def read_summary(self):
        p = self.out / SUMMARY
        return json.loads(p.read_text()) if p.exists() else {}

    def record(self, section, payload):
        summary = self.read_summary()
        summary[section] = payload
        summary["artifacts"] = self.artifacts()
        _dump(self.out / SUMMARY, summary)
        (self.out / SUMMARY_TXT).write_text(render_summary(summary))
        return summary

    def artifacts(self):
        roots = {self.out, self.corpus, self.models}
        files = set()
        for root in roots:
            if root.exists():
                files.update(p for p in root.rglob("*") if p.is_file())
        skip = {self.out / SUMMARY, self.out / SUMMARY_TXT}
        return sorted(self.rel(p) for p in files if p not in skip)


def write_run_json(ws: Workspace, command, extra=None):
    """Resolved config echo; ``started_at`` is the only timestamp written anywhere."""
    ws.out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "version": __version__,
        "seed": ws.config.seed,
        "config": ws.config.to_json(),
        "started_at": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
    }
    doc.update(extra or {})
    return _dump(ws.out / "run.json", doc)


# ---------------------------------------------------------------------------
# steps


def cmd_synth(ws: Workspace):
    cfg = ws.config
    params = cfg.synth_params()
    if cfg.kind == "cfg":
        corpus, truth = gen_cfg_corpus(params)
    else:
        corpus, truth = gen_api_corpus(params)
    manifest = write_synthetic(corpus, truth, ws.corpus)
    _dump(ws.corpus / "params.json", params_dict(params))
    section = {
        "kind": cfg.kind,
        "n_traces": len(corpus),
        "n_benign": len(corpus.with_label(BENIGN)),
        "n_malicious": len(corpus.with_label(MALICIOUS)),
        "manifest": ws.rel(manifest),
        "ground_truth": ws.rel(ws.ground_truth),
    }
    if cfg.kind == "cfg" and params.n_reference:
        ref = gen_reference_traces(params)
        section["reference_manifest"] = ws.rel(write_corpus(ref, ws.reference_manifest.parent))
        section["n_reference"] = len(ref)
    return ws.record("synth", section)


def corpus_split(ws: Workspace, corpus: Corpus):
    train, test = split_corpus(corpus, ws.config.split_ratio, ws.config.seed)
    return train, test


def cmd_train_predictor(ws: Workspace):
    cfg = ws.config
    if cfg.kind != "cfg":
        raise PipelineError("the next-BBID predictor applies to control-flow corpora only (kind = 'cfg')")
    corpus = ws.load_corpus()
    train, _ = corpus_split(ws, corpus)
    benign_train = train.with_label(BENIGN)
    if cfg.predictor_data == "reference":
        fit = load_corpus(ws.require(ws.reference_manifest, "synth"))
        held_out = benign_train
    else:
        fit, held_out = split_corpus(benign_train, 0.8, cfg.seed, stratify=False)
    if cfg.predictor == "ngram":
        model = train_ngram(fit, cfg.context_len, cfg.window_len)
    else:
        model = train_recurrent(fit, cfg.recurrent_config())
    theta = calibrate_threshold(model, held_out, cfg.threshold_margin)
    ws.models.mkdir(parents=True, exist_ok=True)
    save_predictor(model, ws.predictor)
    section = {
        "variant": cfg.predictor,
        "trained_on": cfg.predictor_data,
        "n_train_traces": len(fit),
        "n_threshold_traces": len(held_out),
        "threshold": theta,
        "model": ws.rel(ws.predictor),
    }
    _dump(ws.models / "predictor.json", section)
    return ws.record("train_predictor", section)


def _common_height(lengths, width):
    return max(-(-n // width) for n in lengths)


def cmd_encode(ws: Workspace):
    cfg = ws.config
    corpus = ws.load_corpus()
    encoders = cfg.resolved_encoders()
    section = {"encoders": {}}
    if cfg.kind == "cfg":
        model = load_predictor(ws.require(ws.predictor, "train-predictor"))
        theta = json.loads((ws.models / "predictor.json").read_text())["threshold"]
        outcomes = {t.id: evaluate_trace(model, t) for t in corpus}
        lengths = [min(len(o), cfg.cap) for o in outcomes.values()]
        height = _common_height(lengths, cfg.bitmap_width)
        rows, hits = [], 0
        for t in corpus:
            o = outcomes[t.id]
            img, prov = encode_prediction_bitmap(o, cfg.bitmap_width, height, cfg.cap)
            write_image(_mkparent(ws.image("prediction_bitmap", t.id)), img, "prediction_bitmap", prov)
            verdict, acc = label_trace(o, theta)
            hits += (verdict == "anomalous") == (t.label == MALICIOUS)
            rows.append({"id": t.id, "label": t.label, "n_outcomes": len(o), "accuracy": acc, "verdict": verdict})
        table = _dump(ws.out / "images" / "prediction_bitmap" / "outcomes.json", rows)
        section["encoders"]["prediction_bitmap"] = {
            "width": cfg.bitmap_width,
            "height": height,
            "n_images": len(corpus),
            "outcomes": ws.rel(table),
        }
        section["threshold"] = theta
        section["threshold_detection_accuracy"] = hits / len(corpus)
        benign_acc = [r["accuracy"] for r in rows if r["label"] == BENIGN]
        malicious_acc = [r["accuracy"] for r in rows if r["label"] == MALICIOUS]
        section["median_prediction_accuracy"] = {"benign": _median(benign_acc), "malicious": _median(malicious_acc)}
    else:
        for enc in encoders:
            if enc == "api_sequence":
                height = _common_height([min(len(t), cfg.cap) for t in corpus], cfg.sequence_width)
                fn = lambda t: encode_api_sequence(t, cfg.sequence_width, height, cfg.cap)  # noqa: E731
            else:
                fn = encode_api_existence if enc == "api_existence" else encode_api_frequency
            shape = None
            for t in corpus:
                img, prov = fn(t)
                write_image(_mkparent(ws.image(enc, t.id)), img, enc, prov)
                shape = (img.width, img.height, img.channels)
            section["encoders"][enc] = {"width": shape[0], "height": shape[1], "channels": shape[2], "n_images": len(corpus)}
    return ws.record("encode", section)


def _mkparent(path):
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_train_clf(ws: Workspace):
    cfg = ws.config
    corpus = ws.load_corpus()
    train, test = corpus_split(ws, corpus)
    _dump(ws.split, {"ratio": cfg.split_ratio, "seed": cfg.seed, "train": train.ids, "test": test.ids})
    ws.models.mkdir(parents=True, exist_ok=True)
    section = {"split": ws.rel(ws.split), "n_train": len(train), "n_test": len(test), "encoders": {}}
    for enc in cfg.resolved_encoders():
        X = [ws.load_image(enc, sid)[0].pixels for sid in train.ids]
        model = train_classifier(X, train.labels, cfg.train_config())
        save_model(model, ws.classifier(enc))
        Xt = [ws.load_image(enc, sid)[0].pixels for sid in test.ids]
        acc = clf_accuracy(model, Xt, test.labels)
        metrics = {
            "encoder": enc,
            "test_accuracy": acc,
            "epochs_run": model.meta["epochs_run"],
            "best_epoch": model.meta["best_epoch"],
            "best_val_loss": model.meta["best_val_loss"],
            "history": model.meta["history"],
            "model": ws.rel(ws.classifier(enc)),
        }
        mpath = _dump(ws.out / "classifier" / f"{enc}.json", metrics)
        section["encoders"][enc] = {"test_accuracy": acc, "best_epoch": model.meta["best_epoch"], "metrics": ws.rel(mpath)}
        log.info("%s: test accuracy %.4f", enc, acc)
    return ws.record("train_clf", section)


def explain_sample(ws: Workspace, encoder, model, trace, explained_class=None):
    """Explain one stored image and write explanation, overlay and region report."""
    cfg = ws.config
    image, prov = ws.load_image(encoder, trace.id)
    seg = segment_grid(image, prov, cfg.cell)
    baseline = BASELINES[encoder]
    ex = explain(image, prov, model, cfg.explain_config(), explained_class, baseline, seg)
    report = backmap(ex, seg, prov, trace)
    _dump(ws.explanation(encoder, trace.id, "json"), ex.to_json())
    write_image(ws.explanation(encoder, trace.id, "overlay"), render_overlay(image, seg, ex), f"{encoder}-overlay")
    _dump(ws.explanation(encoder, trace.id, "region"), report.to_json())
    return image, prov, seg, ex, report


def _load_models(ws: Workspace, corpus: Corpus):
    models = {}
    for enc in ws.config.resolved_encoders():
        if ws.config.external_classifier:
            image, _ = ws.load_image(enc, corpus.ids[0])
            models[enc] = ExternalClassifier(ws.config.external_classifier, (image.width, image.height, image.channels))
        else:
            models[enc] = load_model(ws.require(ws.classifier(enc), "train-clf"))
    return models


def cmd_explain(ws: Workspace, sample_ids=None):
    corpus = ws.load_corpus()
    known = set(corpus.ids)
    if sample_ids:
        for sid in sample_ids:
            if sid not in known:
                raise PipelineError(f"unknown sample id {sid!r}")
        ids = list(sample_ids)
    else:
        _, test = ws.load_split()
        ids = [sid for sid in test if corpus[sid].label == MALICIOUS]
    models = _load_models(ws, corpus)
    section = {"samples": {}}
    for enc, model in models.items():
        for sid in ids:
            _, _, _, ex, report = explain_sample(ws, enc, model, corpus[sid])
            section["samples"].setdefault(sid, {})[enc] = {
                "explained_class": ex.explained_class,
                "r2": ex.local_fit_r2,
                "top_k": ex.top_k,
                "explanation": ws.rel(ws.explanation(enc, sid, "json")),
                "overlay": ws.rel(ws.explanation(enc, sid, "overlay")),
                "region": ws.rel(ws.explanation(enc, sid, "region")),
            }
    return ws.record("explain", section)


def cmd_validate(ws: Workspace):
    """Explain each malicious test sample for the malicious class and score it."""
    cfg = ws.config
    corpus = ws.load_corpus()
    truth = {g.trace_id: g for g in read_ground_truth(ws.require(ws.ground_truth, "synth"))}
    _, test = ws.load_split()
    ids = [sid for sid in test if corpus[sid].label == MALICIOUS]
    if cfg.max_explain:
        ids = ids[: cfg.max_explain]
    if not ids:
        raise PipelineError("no malicious samples in the test split")
    models = _load_models(ws, corpus)
    metrics = json.loads(Path(ws.require(ws.out / SUMMARY, "train-clf")).read_text()).get("train_clf", {})

    section = {"n_explained": len(ids), "tau": cfg.tau, "deletion_steps": cfg.deletion_steps, "encoders": {}}
    for enc, model in models.items():
        rows = []
        for sid in ids:
            trace = corpus[sid]
            image, prov, seg, ex, report = explain_sample(ws, enc, model, trace, explained_class=1)
            precision, recall, iou = region_recovery(ex, seg, prov, truth[sid], trace=trace)
            try:
                curve = deletion_curve(image, ex, seg, model, cfg.deletion_steps, BASELINES[enc])
            except FidelityError:
                curve = []
            try:
                signature = extract_signature(report)
                mal, ben = corpus_consistency(signature, corpus)
                sig_json = signature.to_json()
            except FidelityError as exc:
                mal = ben = None
                sig_json = {"error": str(exc)}
            rep = FidelityReport(
                recovery={"precision": precision, "recall": recall, "iou": iou},
                deletion_curve=curve,
                consistency={"malicious": mal, "benign": ben},
                dispersion=dispersion(ex, cfg.tau),
            )
            _dump(ws.fidelity(enc, sid), rep.to_json())
            drop = curve[0][1] - curve[-1][1] if curve else None
            rows.append({"id": sid, "precision": precision, "recall": recall, "iou": iou, "drop": drop,
                         "dispersion": rep.dispersion, "malicious": mal, "benign": ben, "signature": sig_json})
        table = _dump(ws.out / "validation" / f"{enc}.json", rows)
        exact = [r for r in rows if r["malicious"] == 1.0 and r["benign"] == 0.0]
        section["encoders"][enc] = {
            "test_accuracy": metrics.get("encoders", {}).get(enc, {}).get("test_accuracy"),
            "median_precision": _median([r["precision"] for r in rows]),
            "median_recall": _median([r["recall"] for r in rows]),
            "median_iou": _median([r["iou"] for r in rows]),
            "median_deletion_drop": _median([r["drop"] for r in rows]),
            "median_dispersion": _median([r["dispersion"] for r in rows]),
            "consistent_signatures": len(exact) / len(rows),
            "table": ws.rel(table),
        }
    return ws.record("validate", section)


def cmd_run(ws: Workspace):
    """Every step in order."""
    cmd_synth(ws)
    if ws.config.kind == "cfg":
        cmd_train_predictor(ws)
    cmd_encode(ws)
    cmd_train_clf(ws)
    return cmd_validate(ws)


# ---------------------------------------------------------------------------
# plain-text summary


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def render_summary(summary) -> str:
    lines = []
    if "synth" in summary:
        s = summary["synth"]
        lines.append(f"corpus: {s['kind']}, {s['n_benign']} benign + {s['n_malicious']} malicious")
    if "train_predictor" in summary:
        s = summary["train_predictor"]
        lines.append(f"predictor: {s['variant']} on {s['n_train_traces']} traces, threshold {_fmt(s['threshold'])}")
    if "encode" in summary and "threshold_detection_accuracy" in summary["encode"]:
        lines.append(f"threshold detection accuracy: {_fmt(summary['encode']['threshold_detection_accuracy'])}")
    cols = ["encoder", "test_acc", "precision", "recall", "iou", "del_drop", "dispersion", "consistent"]
    table = []
    encs = set(summary.get("train_clf", {}).get("encoders", {})) | set(summary.get("validate", {}).get("encoders", {}))
    for enc in sorted(encs):
        clf = summary.get("train_clf", {}).get("encoders", {}).get(enc, {})
        val = summary.get("validate", {}).get("encoders", {}).get(enc, {})
        table.append([
            enc,
            _fmt(clf.get("test_accuracy")),
            _fmt(val.get("median_precision")),
            _fmt(val.get("median_recall")),
            _fmt(val.get("median_iou")),
            _fmt(val.get("median_deletion_drop")),
            _fmt(val.get("median_dispersion")),
            _fmt(val.get("consistent_signatures")),
        ])
    if table:
        widths = [max(len(r[i]) for r in table + [cols]) for i in range(len(cols))]
        lines.append("")
        lines.append("  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip())
        for r in table:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if "validate" in summary:
            lines.append(f"(medians over {summary['validate']['n_explained']} malicious test samples)")
    lines.append("")
    lines.append(f"{len(summary.get('artifacts', []))} artifacts listed in {SUMMARY}")
    return "\n".join(lines) + "\n"
