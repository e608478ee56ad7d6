"""A control-flow hijack, from raw traces to a scannable signature.

We synthesize traces of one program, teach a next-block predictor what normal
control flow looks like, and turn every trace into a bitmap of its
prediction hits and misses. A small classifier learns to tell the two apart;
the explainer then tells us *where* in the bitmap it looked, and the
provenance map tells us which basic blocks those pixels were.

    python demos/01_control_flow_case.py [outdir]
"""

import sys
from pathlib import Path

import numpy as np

from texp.classifier import TrainConfig, accuracy, train_classifier
from texp.explainer import ExplainConfig, explain, render_overlay, segment_grid
from texp.fidelity import backmap, corpus_consistency, deletion_curve, extract_signature, region_recovery
from texp.imaging import encode_prediction_bitmap, write_image
from texp.predictor import calibrate_threshold, evaluate_trace, label_trace, train_ngram
from texp.synth import SynthParams, gen_cfg_corpus, gen_reference_traces, reserved_bbid
from texp.traces import BENIGN, MALICIOUS, split_corpus

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out")
out.mkdir(parents=True, exist_ok=True)

params = SynthParams(n_benign=120, n_malicious=120, seed=11)
corpus, truth = gen_cfg_corpus(params)
truth = {g.trace_id: g for g in truth}
print(f"{len(corpus)} traces of {params.trace_len} basic blocks each")
print(f"malicious ones hide a loop of {params.anomaly_len} indirect calls to block {reserved_bbid(params)}\n")

# The predictor only ever sees benign runs of the program.
train, test = split_corpus(corpus, 0.8, params.seed)
predictor = train_ngram(gen_reference_traces(params), context_len=4, window_len=16)
theta = calibrate_threshold(predictor, train.with_label(BENIGN))
outcomes = {t.id: evaluate_trace(predictor, t) for t in corpus}
for label in (BENIGN, MALICIOUS):
    accs = [label_trace(outcomes[t.id], theta)[1] for t in corpus.with_label(label)]
    print(f"{label:>9} prediction accuracy: median {np.median(accs):.3f} (threshold {theta:.3f})")

# One white/black pixel per indirect transfer, 8 per row, all images one height.
height = max(-(-len(o) // 8) for o in outcomes.values())
images = {sid: encode_prediction_bitmap(o, 8, height) for sid, o in outcomes.items()}
model = train_classifier([images[s][0].pixels for s in train.ids], train.labels, TrainConfig(seed=params.seed))
print(f"\nbitmap classifier test accuracy: {accuracy(model, [images[s][0].pixels for s in test.ids], test.labels):.3f}")

# Explain one malicious test image and map the highlighted cells back to the trace.
sid = next(s for s in test.ids if corpus[s].label == MALICIOUS)
image, prov = images[sid]
seg = segment_grid(image, prov, 8)
ex = explain(image, prov, model, ExplainConfig(seed=params.seed), explained_class=1)
report = backmap(ex, seg, prov, corpus[sid])
precision, recall, iou = region_recovery(ex, seg, prov, truth[sid])
print(f"\n{sid}: p(malicious) = {ex.base_probability:.3f}, surrogate R^2 = {ex.local_fit_r2:.3f}")
for e in report.entries:
    span = ", ".join(f"[{a}, {b})" for a, b in e.intervals)
    print(f"  superpixel {e.superpixel:3d}  coef {e.coefficient:+.3f}  offsets {span}  block {e.dominant} x{e.longest_run}")
print(f"  planted interval [{truth[sid].start}, {truth[sid].end}): precision {precision:.2f}, recall {recall:.2f}, IoU {iou:.2f}")

curve = deletion_curve(image, ex, seg, model, steps=3)
print("  deletion curve: " + "  ".join(f"{j}:{p:.3f}" for j, p in curve))

# What the analyst would do next: turn the explanation into a signature and grep the corpus.
sig = extract_signature(report)
mal, ben = corpus_consistency(sig, corpus)
print(f"\nsignature: block {sig.bbid} repeated >= {sig.min_run} times in a row")
print(f"found in {mal:.0%} of malicious and {ben:.0%} of benign traces")

write_image(out / f"{sid}.pgm", image, "prediction_bitmap", prov)
write_image(out / f"{sid}.overlay.ppm", render_overlay(image, seg, ex), "prediction_bitmap-overlay")
print(f"\nbitmap and overlay written to {out}/")
