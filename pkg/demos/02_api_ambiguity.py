"""Three pictures of the same API trace, and how clearly each one explains.

Existence and frequency grids give every API a fixed cell. The sequence
image puts calls on a timeline where the planted block lands somewhere new
in every sample, and its explanations spread over more of the picture
(higher dispersion). The frequency model is as accurate as the existence
model, yet its supporting cells rarely hold CryptEncrypt: an accurate model
and a readable explanation are separate questions.

    python demos/02_api_ambiguity.py
"""

import numpy as np

from texp.classifier import TrainConfig, accuracy, train_classifier
from texp.explainer import ExplainConfig, explain, segment_grid
from texp.fidelity import backmap, dispersion
from texp.imaging import BASELINES, encode_api_existence, encode_api_frequency, encode_api_sequence
from texp.synth import CORE_MARKER, SynthParams, gen_api_corpus
from texp.traces import MALICIOUS, split_corpus

params = SynthParams(seed=7)
corpus, truth = gen_api_corpus(params)
train, test = split_corpus(corpus, 0.8, params.seed)
targets = [s for s in test.ids if corpus[s].label == MALICIOUS][:12]
print(f"{len(corpus)} API traces, vocabulary of {len(corpus.samples[0].vocab)} names")
print(f"planted motif of the first malicious trace: {truth[0].motif}\n")

encoders = {
    "api_existence": encode_api_existence,
    "api_frequency": encode_api_frequency,
    "api_sequence": lambda t: encode_api_sequence(t, 64),
}
for name, encode in encoders.items():
    images = {s: encode(corpus[s]) for s in corpus.ids}
    model = train_classifier([images[s][0].pixels for s in train.ids], train.labels, TrainConfig(seed=params.seed))
    acc = accuracy(model, [images[s][0].pixels for s in test.ids], test.labels)
    disp, hits = [], 0
    for sid in targets:
        image, prov = images[sid]
        seg = segment_grid(image, prov, 8)
        ex = explain(image, prov, model, ExplainConfig(n_samples=600, seed=params.seed), 1, BASELINES[name], seg)
        disp.append(dispersion(ex))
        # the supporting cells of an 8x8 grid hold up to 64 names; is the planted one among them?
        hits += CORE_MARKER in backmap(ex, seg, prov, corpus[sid]).api_names
    print(f"{name:14s} accuracy {acc:.3f}  median dispersion {np.median(disp):.3f}  ({len(seg)} superpixels)")
    print(f"{'':14s} {CORE_MARKER} under the supporting cells in {hits}/{len(targets)} explanations")
