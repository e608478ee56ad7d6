"""Back-mapping explanations onto trace content and scoring their fidelity.

``backmap`` turns the highlighted superpixels into trace offsets, BBIDs and
API names; ``extract_signature`` condenses that into something scannable
across a corpus; the remaining functions score an explanation against
planted ground truth, against the model itself (deletion), and for spread.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .explainer import Explanation, Segmentation, perturb_batch
from .imaging import TAG_API, TAG_OFF, TAG_PAD, ImageBuffer, PixelProvenanceMap
from .traces import BENIGN, MALICIOUS, ApiTrace, ControlFlowTrace, Corpus


class FidelityError(ValueError):
    pass


@dataclass(frozen=True)
class RegionEntry:
    superpixel: int
    coefficient: float
    pixel_count: int
    provenance: str  # "off", "api", or "pad" when the cell holds only padding
    intervals: tuple = ()  # half-open trace-offset intervals
    dominant: object = None  # most frequent token (BBID or API name)
    longest_run: int = 0
    api_names: tuple = ()

    def to_json(self):
        return {
            "superpixel": self.superpixel,
            "coefficient": self.coefficient,
            "pixel_count": self.pixel_count,
            "provenance": self.provenance,
            "intervals": [list(iv) for iv in self.intervals],
            "dominant": self.dominant,
            "longest_run": self.longest_run,
            "api_names": list(self.api_names),
        }


@dataclass(frozen=True)
class RegionReport:
    """Per top-k superpixel summaries plus an aggregate over the support set.

    The aggregate (``dominant``/``longest_run``/``api_names``) is computed over
    the positive-coefficient entries, or over all entries if none is positive.
    """

    trace_id: str
    entries: tuple
    provenance: str = ""
    dominant: object = None
    longest_run: int = 0
    api_names: tuple = ()

    def __len__(self):
        return len(self.entries)

    def to_json(self):
        return {
            "trace_id": self.trace_id,
            "provenance": self.provenance,
            "dominant": self.dominant,
            "longest_run": self.longest_run,
            "api_names": list(self.api_names),
            "entries": [e.to_json() for e in self.entries],
        }


def _tokens(trace):
    if isinstance(trace, ControlFlowTrace):
        return trace.bbids
    return trace.calls


def _dominant(values):
    vals, counts = np.unique(values, return_counts=True)
    return int(vals[np.argmax(counts)])  # first maximum is the smallest value


def longest_run(offsets, tokens) -> int:
    """Longest stretch of trace-adjacent offsets sharing one token."""
    offsets = np.unique(np.asarray(offsets, dtype=np.int64))
    if offsets.size == 0:
        return 0
    tok = tokens[offsets]
    brk = np.flatnonzero((np.diff(offsets) != 1) | (tok[1:] != tok[:-1])) + 1
    edges = np.concatenate([[0], brk, [offsets.size]])
    return int(np.diff(edges).max())


def _intervals(pixels, offsets):
    """Contiguous pixel stretches as half-open offset intervals."""
    order = np.argsort(pixels)
    pixels, offsets = pixels[order], offsets[order]
    cut = np.flatnonzero(np.diff(pixels) != 1) + 1
    return tuple((int(o.min()), int(o.max()) + 1) for o in np.split(offsets, cut) if o.size)


def _summarise(prov, pixels, trace, vocab):
    tags, vals = prov.tags[pixels], prov.values[pixels]
    kinds = set(np.unique(tags[tags != TAG_PAD]).tolist())
    if not kinds:
        return "pad", (), None, 0, ()
    if len(kinds) > 1:
        return "mixed", (), None, 0, ()
    if TAG_OFF in kinds:
        keep = tags == TAG_OFF
        offs = vals[keep]
        if trace is None:
            raise FidelityError("trace offsets need the source trace")
        if offs.max() >= len(trace):
            raise FidelityError(f"offset {int(offs.max())} outside trace {trace.id!r}")
        tokens = _tokens(trace)
        dom = _dominant(tokens[offs])
        names = ()
        if isinstance(trace, ApiTrace):
            names = tuple(sorted({trace.vocab[c] for c in tokens[offs]}))
            dom = trace.vocab[dom]
        return "off", _intervals(pixels[keep], offs), dom, longest_run(offs, tokens), names
    ids = vals[tags == TAG_API]
    if vocab is None:
        raise FidelityError("api provenance needs a vocabulary or api trace")
    if ids.max() >= len(vocab):
        raise FidelityError(f"api id {int(ids.max())} outside vocabulary")
    if isinstance(trace, ApiTrace):
        called = set(np.unique(trace.calls).tolist())
        ids = np.array([i for i in ids if i in called], dtype=np.int64)
    return "api", (), None, 0, tuple(sorted(vocab[i] for i in ids))


def backmap(explanation: Explanation, segmentation: Segmentation, provenance: PixelProvenanceMap, trace_or_vocab) -> RegionReport:
    """Summarise the trace content under each top-k superpixel.

    ``trace_or_vocab`` is the source ``ControlFlowTrace``/``ApiTrace``, or a
    bare API vocabulary for existence/frequency images.
    """
    if len(explanation.coefficients) != len(segmentation):
        raise FidelityError("explanation and segmentation disagree on the number of superpixels")
    if len(provenance) != segmentation.width * segmentation.height:
        raise FidelityError("provenance and segmentation disagree on the pixel count")
    if isinstance(trace_or_vocab, (ControlFlowTrace, ApiTrace)):
        trace = trace_or_vocab
        vocab = trace.vocab if isinstance(trace, ApiTrace) else None
    else:
        trace, vocab = None, tuple(trace_or_vocab)
    tid = trace.id if trace is not None else ""

    entries = []
    for j in explanation.top_k:
        px = segmentation.superpixels[j]
        kind, ivs, dom, run, names = _summarise(provenance, px, trace, vocab)
        entries.append(RegionEntry(j, float(explanation.coefficients[j]), int(px.size), kind, ivs, dom, run, names))
    if not entries:
        return RegionReport(tid, ())

    support = [e for e in entries if e.coefficient > 0] or entries
    pixels = np.concatenate([segmentation.superpixels[e.superpixel] for e in support])
    kind, _, dom, run, names = _summarise(provenance, pixels, trace, vocab)
    return RegionReport(tid, tuple(entries), kind, dom, run, names)


@dataclass(frozen=True)
class CfgSignature:
    bbid: int
    min_run: int

    def matches(self, trace: ControlFlowTrace) -> bool:
        hit = trace.bbids == self.bbid
        if self.min_run <= 1:
            return bool(hit.any())
        padded = np.concatenate([[False], hit, [False]])
        edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
        runs = edges[1::2] - edges[::2]
        return bool(runs.size and runs.max() >= self.min_run)

    def to_json(self):
        return {"kind": "cfg", "bbid": self.bbid, "min_run": self.min_run}


@dataclass(frozen=True)
class ApiSignature:
    names: frozenset

    def matches(self, trace: ApiTrace) -> bool:
        called = {trace.vocab[c] for c in np.unique(trace.calls)}
        return self.names <= called

    def to_json(self):
        return {"kind": "api", "names": sorted(self.names)}


def extract_signature(report: RegionReport):
    """Dominant BBID with half the observed run, or the set of API names."""
    if not report.entries:
        raise FidelityError("empty region report")
    if report.provenance == "mixed" or len({e.provenance for e in report.entries} - {"pad"}) > 1:
        raise FidelityError("heterogeneous provenance")
    if report.api_names:
        return ApiSignature(frozenset(report.api_names))
    if report.provenance == "off" and report.dominant is not None:
        return CfgSignature(int(report.dominant), max(1, report.longest_run // 2))
    raise FidelityError("report carries no trace-offset or api provenance")


def corpus_consistency(signature, corpus: Corpus):
    """Fraction of malicious and of benign traces containing the signature."""
    if len(corpus) == 0:
        raise FidelityError("empty corpus")
    hits = {MALICIOUS: [0, 0], BENIGN: [0, 0]}
    for t in corpus:
        hits[t.label][0] += bool(signature.matches(t))
        hits[t.label][1] += 1
    frac = {lab: (h / n if n else 0.0) for lab, (h, n) in hits.items()}
    return frac[MALICIOUS], frac[BENIGN]


def ground_truth_pixels(provenance: PixelProvenanceMap, region, trace=None) -> np.ndarray:
    """Boolean pixel mask of the planted interval."""
    if trace is not None:
        if region.end > len(trace):
            raise FidelityError(f"ground truth [{region.start}, {region.end}) outside trace of length {len(trace)}")
    if region.start < 0 or region.end <= region.start:
        raise FidelityError("ground-truth interval out of bounds")
    off = provenance.tags == TAG_OFF
    if off.any():
        return off & (provenance.values >= region.start) & (provenance.values < region.end)
    if not isinstance(trace, ApiTrace):
        raise FidelityError("api-grid ground truth needs the api trace")
    planted = np.unique(trace.calls[region.start : region.end])
    return (provenance.tags == TAG_API) & np.isin(provenance.values, planted)


def region_recovery(explanation, segmentation, provenance, ground_truth, k=None, trace=None):
    """``(precision, recall, iou)`` of top-k explanation pixels vs planted pixels."""
    top = explanation.top_k if k is None else explanation.top_k[:k]
    n = segmentation.width * segmentation.height
    E = np.zeros(n, dtype=bool)
    for j in top:
        E[segmentation.superpixels[j]] = True
    G = ground_truth_pixels(provenance, ground_truth, trace)
    inter = int(np.count_nonzero(E & G))
    union = int(np.count_nonzero(E | G))
    ne, ng = int(E.sum()), int(G.sum())
    precision = inter / ne if ne else 0.0
    recall = inter / ng if ng else 0.0
    iou = inter / union if union else 0.0
    return precision, recall, iou


def support_order(explanation):
    """Positive-coefficient superpixels, strongest first (ties to smaller index)."""
    c = np.asarray(explanation.coefficients)
    order = np.lexsort((np.arange(c.size), -c))
    return [int(j) for j in order if c[j] > 0]


def deletion_curve(image: ImageBuffer, explanation, segmentation, model, steps=3, baseline=None):
    """Explained-class probability after removing the top-j support regions."""
    support = support_order(explanation)
    if not support:
        raise FidelityError("explanation has no positive coefficient")
    if baseline is None:
        baseline = explanation.config.get("baseline", 128 if image.channels == 1 else (0, 0, 0))
    K = len(segmentation)
    masks = np.ones((min(steps, len(support)) + 1, K), dtype=np.int8)
    for j in range(1, masks.shape[0]):
        masks[j:, support[j - 1]] = 0
    batch = perturb_batch(image.pixels, segmentation, masks, baseline)
    probs = model.predict_proba(batch)[:, explanation.explained_class]
    return [(j, float(p)) for j, p in enumerate(probs)]


def dispersion(explanation, tau=0.2) -> float:
    """Fraction of superpixels with ``|coef| >= tau * max |coef|``."""
    c = np.abs(np.asarray(explanation.coefficients, dtype=np.float64))
    if c.size == 0:
        raise FidelityError("explanation has no superpixels")
    peak = c.max()
    if peak == 0:
        return 1.0
    return float(np.count_nonzero(c >= tau * peak)) / c.size


@dataclass
class FidelityReport:
    recovery: dict = field(default_factory=dict)
    deletion_curve: list = field(default_factory=list)
    consistency: dict = field(default_factory=dict)
    dispersion: float = math.nan

    def to_json(self):
        return {
            "recovery": dict(self.recovery),
            "deletion_curve": [[int(j), float(p)] for j, p in self.deletion_curve],
            "consistency": dict(self.consistency),
            "dispersion": self.dispersion,
        }
