"""Trace and corpus types, JSON-Lines parsing, and deterministic splitting.

Control-flow traces are stored column-wise (``bbids`` / ``kinds`` arrays)
because downstream code slides windows over tens of thousands of events.
``TraceEvent`` is the per-event view used at API boundaries.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np

from ._seeding import STREAM_SPLIT, derive_rng

BENIGN = "benign"
MALICIOUS = "malicious"
LABELS = (BENIGN, MALICIOUS)

_UINT32_MAX = (1 << 32) - 1


class TraceFormatError(ValueError):
    """A trace file does not follow the JSON-Lines event format."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CorpusError(ValueError):
    """A manifest or corpus-level constraint is violated."""


class Kind(str, Enum):
    RET = "ret"
    CALL = "call"
    ICALL = "icall"
    IJMP = "ijmp"
    JMP = "jmp"
    COND = "cond"

    @property
    def code(self) -> int:
        return KIND_CODES[self]


KINDS = tuple(Kind)
KIND_CODES = {k: i for i, k in enumerate(KINDS)}
INDIRECT_KINDS = frozenset({Kind.RET, Kind.ICALL, Kind.IJMP})
# boolean lookup table indexed by kind code
INDIRECT_MASK = np.array([k in INDIRECT_KINDS for k in KINDS])


def is_indirect(kind) -> bool:
    """True for returns, indirect calls and indirect jumps."""
    return Kind(kind) in INDIRECT_KINDS


def _check_label(label):
    if label not in LABELS:
        raise ValueError(f"unknown label {label!r}; expected one of {LABELS}")
    return label


@dataclass(frozen=True)
class TraceEvent:
    bbid: int
    kind: Kind

    def __post_init__(self):
        if isinstance(self.bbid, bool) or not isinstance(self.bbid, (int, np.integer)):
            raise TypeError("bbid must be an integer")
        if self.bbid < 0:
            raise ValueError("bbid must be non-negative")
        object.__setattr__(self, "kind", Kind(self.kind))

    @property
    def indirect(self) -> bool:
        return self.kind in INDIRECT_KINDS


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ControlFlowTrace:
    """Executed basic-block sequence of one program run.

    ``bbids`` and ``kinds`` are parallel read-only arrays; ``kinds`` holds
    ``Kind`` codes (index into ``KINDS``).
    """

    id: str
    label: str
    bbids: np.ndarray
    kinds: np.ndarray

    def __post_init__(self):
        _check_label(self.label)
        bbids = _readonly(self.bbids, np.int64)
        kinds = _readonly(self.kinds, np.int8)
        if bbids.ndim != 1 or bbids.shape != kinds.shape:
            raise ValueError("bbids and kinds must be 1-d and of equal length")
        if bbids.size and bbids.min() < 0:
            raise ValueError("bbids must be non-negative")
        if kinds.size and (kinds.min() < 0 or kinds.max() >= len(KINDS)):
            raise ValueError("kind code out of range")
        object.__setattr__(self, "bbids", bbids)
        object.__setattr__(self, "kinds", kinds)

    @classmethod
    def from_events(cls, id, label, events: Sequence[TraceEvent]):
        return cls(
            id,
            label,
            [e.bbid for e in events],
            [Kind(e.kind).code for e in events],
        )

    def __len__(self):
        return int(self.bbids.size)

    @property
    def events(self) -> list[TraceEvent]:
        return [TraceEvent(int(b), KINDS[k]) for b, k in zip(self.bbids, self.kinds)]

    @property
    def indirect(self) -> np.ndarray:
        """Boolean mask of indirect-transfer positions."""
        return INDIRECT_MASK[self.kinds]

    def __eq__(self, other):
        if not isinstance(other, ControlFlowTrace):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and np.array_equal(self.bbids, other.bbids)
            and np.array_equal(self.kinds, other.kinds)
        )


@dataclass(frozen=True, eq=False)
class ApiTrace:
    """API-call sequence; ``calls`` index into the sorted ``vocab``."""

    id: str
    label: str
    calls: np.ndarray
    vocab: tuple

    def __post_init__(self):
        _check_label(self.label)
        vocab = tuple(self.vocab)
        if len(set(vocab)) != len(vocab):
            raise ValueError("vocab entries must be unique")
        if list(vocab) != sorted(vocab):
            raise ValueError("vocab must be sorted lexicographically")
        calls = _readonly(self.calls, np.int64)
        if calls.ndim != 1:
            raise ValueError("calls must be 1-d")
        if calls.size and (calls.min() < 0 or calls.max() >= len(vocab)):
            raise ValueError("api id out of vocabulary range")
        object.__setattr__(self, "vocab", vocab)
        object.__setattr__(self, "calls", calls)

    @classmethod
    def from_names(cls, id, label, names: Sequence[str], vocab=None):
        vocab = tuple(sorted(set(names))) if vocab is None else tuple(vocab)
        index = {name: i for i, name in enumerate(vocab)}
        try:
            calls = [index[n] for n in names]
        except KeyError as exc:
            raise ValueError(f"api {exc.args[0]!r} not in vocabulary") from None
        return cls(id, label, calls, vocab)

    def __len__(self):
        return int(self.calls.size)

    @property
    def names(self) -> list[str]:
        return [self.vocab[c] for c in self.calls]

    def with_vocab(self, vocab) -> "ApiTrace":
        """Re-index the same call sequence under a (superset) vocabulary."""
        return ApiTrace.from_names(self.id, self.label, self.names, vocab)

    def __eq__(self, other):
        if not isinstance(other, ApiTrace):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.vocab == other.vocab
            and np.array_equal(self.calls, other.calls)
        )


Trace = Union[ControlFlowTrace, ApiTrace]


@dataclass(frozen=True)
class Corpus:
    samples: tuple
    manifest_path: str = ""
    kind: str = "cfg"

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.kind not in ("cfg", "api"):
            raise CorpusError(f"unknown corpus kind {self.kind!r}")
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise CorpusError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)

    def __len__(self):
        return len(self.samples)

    def __iter__(self) -> Iterator[Trace]:
        return iter(self.samples)

    def __getitem__(self, sample_id: str) -> Trace:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.samples]

    def with_label(self, label) -> "Corpus":
        return Corpus(
            tuple(s for s in self.samples if s.label == label), self.manifest_path, self.kind
        )


def _iter_json_lines(data):
    if isinstance(data, (bytes, bytearray, memoryview)):
        try:
            text = bytes(data).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TraceFormatError(f"not valid UTF-8 ({exc.reason})") from None
    else:
        text = data
    n = 0
    # split on \n only: str.splitlines also breaks on U+0085/U+2028, which are legal inside JSON strings
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"malformed JSON ({exc.msg})", lineno) from None
        if not isinstance(obj, dict):
            raise TraceFormatError("expected a JSON object", lineno)
        n += 1
        yield lineno, obj
    if n == 0:
        raise TraceFormatError("empty trace")


def parse_control_flow_trace(data, id, label) -> ControlFlowTrace:
    """Parse ``{"bbid": int, "kind": str}`` JSON Lines into a trace."""
    bbids, kinds = [], []
    for lineno, obj in _iter_json_lines(data):
        if set(obj) != {"bbid", "kind"}:
            raise TraceFormatError(f"expected keys bbid and kind, got {sorted(obj)}", lineno)
        bbid, kind = obj["bbid"], obj["kind"]
        if isinstance(bbid, bool) or not isinstance(bbid, int):
            raise TraceFormatError(f"bbid must be an integer, got {bbid!r}", lineno)
        if bbid < 0 or bbid > _UINT32_MAX:
            raise TraceFormatError(f"bbid {bbid} outside uint32 range", lineno)
        try:
            code = Kind(kind).code
        except ValueError:
            raise TraceFormatError(f"unknown kind {kind!r}", lineno) from None
        bbids.append(bbid)
        kinds.append(code)
    return ControlFlowTrace(id, label, bbids, kinds)


def parse_api_trace(data, id, label) -> ApiTrace:
    """Parse ``{"api": str}`` JSON Lines; names are opaque strings."""
    names = []
    for lineno, obj in _iter_json_lines(data):
        if set(obj) != {"api"}:
            raise TraceFormatError(f"expected key api, got {sorted(obj)}", lineno)
        name = obj["api"]
        if not isinstance(name, str) or not name:
            raise TraceFormatError("api must be a non-empty string", lineno)
        names.append(name)
    return ApiTrace.from_names(id, label, names)


def serialize_trace(trace: Trace) -> bytes:
    """Canonical JSON-Lines encoding (compact separators, fixed key order)."""
    if isinstance(trace, ControlFlowTrace):
        lines = [
            f'{{"bbid":{int(b)},"kind":"{KINDS[k].value}"}}' for b, k in zip(trace.bbids, trace.kinds)
        ]
    else:
        lines = [json.dumps({"api": n}, ensure_ascii=False, separators=(",", ":")) for n in trace.names]
    return ("\n".join(lines) + "\n").encode("utf-8")


def load_corpus(manifest_path) -> Corpus:
    """Load every sample listed in a manifest, in manifest order.

    API traces are re-indexed under the sorted union of all names observed in
    the corpus so that every sample shares one vocabulary.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise CorpusError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusError(f"manifest {manifest_path} is not valid JSON: {exc.msg}") from None
    if not isinstance(manifest, dict) or "samples" not in manifest or "kind" not in manifest:
        raise CorpusError("manifest must be an object with 'kind' and 'samples'")
    kind = manifest["kind"]
    if kind not in ("cfg", "api"):
        raise CorpusError(f"unknown corpus kind {kind!r}")
    parse = parse_control_flow_trace if kind == "cfg" else parse_api_trace

    root = manifest_path.parent
    samples, seen = [], set()
    for entry in manifest["samples"]:
        try:
            sid, rel, label = entry["id"], entry["path"], entry["label"]
        except (KeyError, TypeError):
            raise CorpusError(f"malformed manifest entry {entry!r}") from None
        if sid in seen:
            raise CorpusError(f"duplicate sample id {sid!r}")
        seen.add(sid)
        if label not in LABELS:
            raise CorpusError(f"sample {sid!r}: unknown label {label!r}")
        path = root / rel
        if not path.is_file():
            raise CorpusError(f"sample {sid!r}: missing trace file {path}")
        try:
            samples.append(parse(path.read_bytes(), sid, label))
        except TraceFormatError as exc:
            raise CorpusError(f"sample {sid!r} ({path}): {exc}") from exc

    if kind == "api":
        declared = manifest.get("vocab")
        if declared is not None:
            if not isinstance(declared, list) or not all(isinstance(n, str) and n for n in declared):
                raise CorpusError("manifest 'vocab' must be a list of non-empty API names")
            known = set(declared)
            for s in samples:
                extra = sorted(set(s.vocab) - known)
                if extra:
                    raise CorpusError(f"sample {s.id!r}: api {extra[0]!r} not in the manifest vocabulary")
        samples = unify_vocab(samples, declared)
    return Corpus(tuple(samples), str(manifest_path), kind)


def unify_vocab(samples: Sequence[ApiTrace], extra=()) -> list[ApiTrace]:
    """Re-index every trace under the sorted union of all names (plus ``extra``)."""
    vocab = tuple(sorted(set(extra or ()).union(*(s.vocab for s in samples))))
    return [s if s.vocab == vocab else s.with_vocab(vocab) for s in samples]


def write_corpus(corpus: Corpus, root) -> Path:
    """Write trace files plus ``manifest.json`` under ``root``."""
    root = Path(root)
    (root / "traces").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in corpus:
        rel = f"traces/{s.id}.jsonl"
        (root / rel).write_bytes(serialize_trace(s))
        entries.append({"id": s.id, "path": rel, "label": s.label})
    doc = {"kind": corpus.kind, "samples": entries}
    if corpus.kind == "api" and len(corpus):
        # keeps names no trace happens to call, so grids keep their size
        doc["vocab"] = list(corpus.samples[0].vocab)
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps(doc, indent=1) + "\n")
    return manifest


def split_corpus(corpus: Corpus, ratio=0.8, seed=0, stratify=True):
    """Seeded stratified train/test split.

    Each label contributes ``floor(ratio * n_label)`` training samples; any
    shortfall against ``floor(ratio * N)`` goes to train, one sample per label
    in order of largest fractional part. Both halves keep corpus order.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    n = len(corpus)
    if n < 2:
        raise CorpusError("need at least 2 samples to split")

    labels = corpus.labels
    groups = {lab: [i for i, l in enumerate(labels) if l == lab] for lab in LABELS} if stratify else {
        None: list(range(n))
    }
    if stratify:
        for lab, idx in groups.items():
            if not idx:
                raise CorpusError(f"stratified split requested but label {lab!r} has no samples")

    quota = {lab: math.floor(ratio * len(idx)) for lab, idx in groups.items()}
    shortfall = math.floor(ratio * n) - sum(quota.values())
    by_fraction = sorted(groups, key=lambda lab: -(ratio * len(groups[lab]) - quota[lab]))
    for lab in by_fraction[: max(shortfall, 0)]:
        quota[lab] += 1

    rng = derive_rng(seed, STREAM_SPLIT)
    train_idx = set()
    for lab in groups:  # fixed iteration order keeps the stream deterministic
        idx = np.array(groups[lab])
        order = idx[rng.permutation(idx.size)]
        train_idx.update(int(i) for i in order[: quota[lab]])

    train = tuple(s for i, s in enumerate(corpus.samples) if i in train_idx)
    test = tuple(s for i, s in enumerate(corpus.samples) if i not in train_idx)
    return (
        Corpus(train, corpus.manifest_path, corpus.kind),
        Corpus(test, corpus.manifest_path, corpus.kind),
    )
