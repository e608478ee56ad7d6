"""Deterministic synthetic corpora with planted, recorded anomalies.

Benign control flow comes from a fixed order-``markov_order`` Markov chain
over BBIDs: every context has one dominant successor (chosen by hashing the
context) taken with probability ``p_dominant``; otherwise the next block is
uniform over the whole benign vocabulary. Malicious traces are benign draws
with a long run of one reserved ``icall`` block spliced in.

Every sample is generated from its own child stream ``(seed, stream, index)``
so the output does not depend on generation order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ._seeding import (
    STREAM_API_POOL,
    STREAM_BENIGN,
    STREAM_CHAIN,
    STREAM_KINDS,
    STREAM_MALICIOUS,
    STREAM_REFERENCE,
    derive_rng,
    mix,
)
from .traces import BENIGN, MALICIOUS, ApiTrace, ControlFlowTrace, Corpus, Kind, write_corpus

CRYPTO_MARKERS = (
    "CryptAcquireContextA",
    "CryptAcquireContextW",
    "CryptCreateHash",
    "CryptDecrypt",
    "CryptDestroyKey",
    "CryptEncrypt",
    "CryptExportKey",
    "CryptGenKey",
    "CryptHashData",
    "CryptImportKey",
    "CryptReleaseContext",
)
HTTP_MARKERS = (
    "HttpOpenRequestA",
    "HttpOpenRequestW",
    "HttpSendRequestA",
    "HttpSendRequestW",
    "InternetCloseHandle",
    "InternetConnectA",
    "InternetConnectW",
    "InternetOpenA",
    "InternetOpenW",
    "InternetReadFile",
    "WinHttpConnect",
    "WinHttpOpen",
    "WinHttpSendRequest",
)
MARKER_POOL = CRYPTO_MARKERS + HTTP_MARKERS

_VERBS = (
    "Add", "Close", "Copy", "Create", "Delete", "Enum", "Find", "Flush", "Get", "Load",
    "Lock", "Map", "Move", "Open", "Query", "Read", "Register", "Release", "Remove",
    "Set", "Show", "Unlock", "Update", "Write",
)
_OBJECTS = (
    "Accelerator", "Atom", "Bitmap", "Brush", "Caret", "Clipboard", "Cursor", "Dialog",
    "Directory", "File", "FileMapping", "Font", "Icon", "IniString", "Menu", "MenuItem",
    "Palette", "ProfileString", "Prop", "RegKey", "RegValue", "Resource", "ScrollInfo",
    "StatusBar", "ToolBar", "Volume", "Window", "WindowText",
)
_SUFFIXES = ("A", "W", "ExA", "ExW")

# fraction of the benign BBID vocabulary per block kind
_KIND_SHARES = (
    (Kind.RET, 0.10),
    (Kind.ICALL, 0.07),
    (Kind.IJMP, 0.04),
    (Kind.CALL, 0.25),
    (Kind.JMP, 0.25),
    (Kind.COND, 0.29),
)


@dataclass(frozen=True)
class SynthParams:
    n_benign: int = 200
    n_malicious: int = 200
    trace_len: int = 4096
    vocab_size: int = 512
    anomaly_len: int = 300
    markov_order: int = 2
    seed: int = 7
    # probability that the benign chain follows its context's dominant successor
    p_dominant: float = 0.7
    # extra benign traces reserved for training the next-block predictor
    n_reference: int = 200

    def __post_init__(self):
        if self.n_benign < 0 or self.n_malicious < 0 or self.n_reference < 0:
            raise ValueError("sample counts must be non-negative")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be at least 4")
        if self.markov_order < 1:
            raise ValueError("markov_order must be at least 1")
        if self.anomaly_len < 1:
            raise ValueError("anomaly_len must be at least 1")
        if self.anomaly_len >= self.trace_len:
            raise ValueError(
                f"anomaly_len ({self.anomaly_len}) must be smaller than trace_len ({self.trace_len})"
            )
        if not 0.0 <= self.p_dominant <= 1.0:
            raise ValueError("p_dominant must lie in [0, 1]")


@dataclass(frozen=True)
class GroundTruthRegion:
    trace_id: str
    start: int
    end: int
    motif: str

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid interval [{self.start}, {self.end})")

    def to_json(self):
        return {"trace_id": self.trace_id, "start": self.start, "end": self.end, "motif": self.motif}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["trace_id"], int(obj["start"]), int(obj["end"]), obj["motif"])


def reserved_bbid(params: SynthParams) -> int:
    """The icall block used only by the planted loop."""
    return params.vocab_size - 1


def block_kinds(params: SynthParams) -> np.ndarray:
    """Fixed kind code for every BBID (the reserved block is an icall)."""
    n = params.vocab_size - 1
    counts = [int(round(share * n)) for _, share in _KIND_SHARES]
    counts[-1] = n - sum(counts[:-1])
    codes = np.repeat([k.code for k, _ in _KIND_SHARES], counts).astype(np.int8)
    codes = codes[derive_rng(params.seed, STREAM_KINDS).permutation(n)]
    return np.append(codes, np.int8(Kind.ICALL.code))


def _splitmix(x):
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _chain_walk(params, stream, count):
    """Draw ``count`` benign BBID sequences, one child stream per sample."""
    T, m = params.trace_len, params.markov_order
    n_sym = params.vocab_size - 1
    key = np.uint64(mix(params.seed, STREAM_CHAIN))
    out = np.empty((count, T), dtype=np.int64)
    if count == 0:
        return out, []
    rngs = [derive_rng(params.seed, stream, i) for i in range(count)]
    head = np.stack([r.integers(0, n_sym, m) for r in rngs])
    follow = np.stack([r.random(T) < params.p_dominant for r in rngs])
    jumps = np.stack([r.integers(0, n_sym, T) for r in rngs])

    ctx = [head[:, j].astype(np.uint64) for j in range(m)]
    with np.errstate(over="ignore"):
        for t in range(T):
            h = np.full(count, key, dtype=np.uint64)
            for c in ctx:
                h = _splitmix(h ^ c)
            dominant = (h % np.uint64(n_sym)).astype(np.int64)
            nxt = np.where(follow[:, t], dominant, jumps[:, t])
            out[:, t] = nxt
            ctx = ctx[1:] + [nxt.astype(np.uint64)]
    return out, rngs


def gen_cfg_corpus(params: SynthParams = SynthParams()):
    """Benign and malicious control-flow traces plus planted ground truth."""
    kinds = block_kinds(params)
    loop = reserved_bbid(params)
    samples, truth = [], []

    benign, _ = _chain_walk(params, STREAM_BENIGN, params.n_benign)
    for i, seq in enumerate(benign):
        samples.append(ControlFlowTrace(f"benign-{i:04d}", BENIGN, seq, kinds[seq]))

    malicious, rngs = _chain_walk(params, STREAM_MALICIOUS, params.n_malicious)
    a = params.anomaly_len
    for i, (seq, rng) in enumerate(zip(malicious, rngs)):
        start = int(rng.integers(0, params.trace_len - a + 1))
        seq = seq.copy()
        seq[start : start + a] = loop
        sid = f"malicious-{i:04d}"
        samples.append(ControlFlowTrace(sid, MALICIOUS, seq, kinds[seq]))
        truth.append(GroundTruthRegion(sid, start, start + a, f"icall bbid={loop} x{a}"))
    return Corpus(tuple(samples), "", "cfg"), truth


def gen_reference_traces(params: SynthParams = SynthParams(), n=None) -> Corpus:
    """Additional benign traces of the same program, disjoint from the corpus."""
    n = params.n_reference if n is None else n
    kinds = block_kinds(params)
    seqs, _ = _chain_walk(params, STREAM_REFERENCE, n)
    samples = [ControlFlowTrace(f"reference-{i:04d}", BENIGN, s, kinds[s]) for i, s in enumerate(seqs)]
    return Corpus(tuple(samples), "", "cfg")


def benign_api_pool(params: SynthParams) -> tuple:
    """Deterministic benign API names (file, registry and GUI calls)."""
    names = sorted(f"{v}{o}{s}" for v in _VERBS for o in _OBJECTS for s in _SUFFIXES)
    size = params.vocab_size - len(MARKER_POOL)
    if size < 2:
        raise ValueError(f"vocab_size must exceed the marker pool size ({len(MARKER_POOL)}) by 2")
    if size > len(names):
        raise ValueError(f"vocab_size too large; at most {len(names) + len(MARKER_POOL)}")
    pick = derive_rng(params.seed, STREAM_API_POOL).permutation(len(names))[:size]
    return tuple(names[i] for i in sorted(pick))


# inclusive range of extra crypto (and of HTTP) markers per malicious trace
_MARKERS_PER_GROUP = (1, 2)
# the encryption loop dominates the injected block
CORE_MARKER = "CryptEncrypt"
_CORE_SHARE = 0.9
# benign call popularity follows rank ** -_ZIPF_EXPONENT
_ZIPF_EXPONENT = 3.0
_REPEAT_P = 0.3


def _api_weights(params, pool_size):
    # one popularity ranking shared by all benign programs
    rank = derive_rng(params.seed, STREAM_API_POOL, 1).permutation(pool_size)
    w = (rank + 1.0) ** -_ZIPF_EXPONENT
    return w / w.sum()


def _api_draw(params, rng, weights):
    """Pool indices of one benign call sequence (Zipf draws with immediate repeats)."""
    T = params.trace_len
    idx = rng.choice(weights.size, size=T, p=weights)
    repeat = np.flatnonzero(rng.random(T) < _REPEAT_P)
    for t in repeat[repeat > 0]:
        idx[t] = idx[t - 1]
    return idx


def _marker_block(rng, a):
    """``a`` marker calls: mostly CORE_MARKER, the rest spread over a few
    crypto and HTTP names. Returns the names and the sorted marker set."""
    lo, hi = _MARKERS_PER_GROUP
    crypto = rng.choice(len(CRYPTO_MARKERS), size=int(rng.integers(lo, hi + 1)), replace=False)
    http = rng.choice(len(HTTP_MARKERS), size=int(rng.integers(lo, hi + 1)), replace=False)
    chosen = sorted({CORE_MARKER} | {CRYPTO_MARKERS[j] for j in crypto} | {HTTP_MARKERS[j] for j in http})
    others = [n for n in chosen if n != CORE_MARKER]
    pick = rng.integers(0, len(others), a)
    core = rng.random(a) < _CORE_SHARE
    pick[: len(others)] = np.arange(len(others))  # every chosen marker occurs
    core[: len(others)] = False
    core[len(others)] = True
    perm = rng.permutation(a)
    block = [CORE_MARKER if c else others[j] for c, j in zip(core[perm], pick[perm])]
    return block, chosen


def gen_api_corpus(params: SynthParams = SynthParams()):
    """Benign and malicious API traces; malicious ones carry a block of
    crypto/HTTP marker calls whose names never occur in benign traces.

    The shared vocabulary is the benign pool plus the marker pool, sorted,
    so it has exactly ``vocab_size`` names.
    """
    if params.anomaly_len < 2 * _MARKERS_PER_GROUP[1] + 1:
        raise ValueError("anomaly_len too short for a marker block")
    pool = benign_api_pool(params)
    vocab = tuple(sorted(pool + MARKER_POOL))
    index = {n: i for i, n in enumerate(vocab)}
    pool_ids = np.array([index[n] for n in pool], dtype=np.int64)
    weights = _api_weights(params, len(pool))
    samples, truth = [], []
    for i in range(params.n_benign):
        rng = derive_rng(params.seed, STREAM_BENIGN, i)
        calls = pool_ids[_api_draw(params, rng, weights)]
        samples.append(ApiTrace(f"benign-{i:04d}", BENIGN, calls, vocab))

    a = params.anomaly_len
    for i in range(params.n_malicious):
        rng = derive_rng(params.seed, STREAM_MALICIOUS, i)
        calls = pool_ids[_api_draw(params, rng, weights)]
        start = int(rng.integers(0, params.trace_len - a + 1))
        block, chosen = _marker_block(rng, a)
        calls[start : start + a] = [index[n] for n in block]
        sid = f"malicious-{i:04d}"
        samples.append(ApiTrace(sid, MALICIOUS, calls, vocab))
        truth.append(GroundTruthRegion(sid, start, start + a, ",".join(chosen)))
    return Corpus(tuple(samples), "", "api"), truth


def write_ground_truth(truth, path):
    path = Path(path)
    path.write_text(json.dumps([g.to_json() for g in truth], indent=1) + "\n")
    return path


def read_ground_truth(path):
    return [GroundTruthRegion.from_json(o) for o in json.loads(Path(path).read_text())]


def write_synthetic(corpus: Corpus, truth, root):
    """Write traces, ``manifest.json`` and ``ground_truth.json`` under ``root``."""
    manifest = write_corpus(corpus, root)
    write_ground_truth(truth, Path(root) / "ground_truth.json")
    return manifest


def params_dict(params: SynthParams) -> dict:
    return asdict(params)
