"""Next-BBID prediction from benign traces, scored at indirect transfers.

Two interchangeable predictors share the ``predict_windows`` interface:

* ``NgramPredictor`` -- count tables for context orders ``1..c`` with add-one
  smoothing and back-off to the global unigram.
* ``RecurrentPredictor`` -- embedding, one GRU layer and a softmax output,
  trained with truncated backpropagation through each window.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _binfmt
from ._seeding import STREAM_INIT, STREAM_SHUFFLE, derive_rng
from .traces import BENIGN, ControlFlowTrace, Corpus

log = logging.getLogger(__name__)

PRED_MAGIC = b"TEXP-PRED1"
FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, loss):
        self.epoch = epoch
        super().__init__(f"loss became non-finite ({loss}) in epoch {epoch}")


def _benign_traces(corpus: Corpus):
    traces = list(corpus)
    if not traces:
        raise ValueError("cannot train on an empty corpus")
    bad = [t.id for t in traces if t.label != BENIGN]
    if bad:
        raise ValueError(f"predictor training requires benign traces only; got malicious {bad[:3]}")
    return traces


# ---------------------------------------------------------------------------
# n-gram


class NgramPredictor:
    """Back-off n-gram model over BBIDs.

    ``tables[k-1]`` holds the order-``k`` table as ``(rows, counts)`` where each
    row is ``(context_1..context_k, next)``, lexicographically sorted.
    """

    variant = "ngram"

    def __init__(self, window_len, context_len, vocab, unigram, tables):
        if window_len < 2:
            raise ValueError("window_len must be at least 2")
        if not 1 <= context_len <= window_len:
            raise ValueError("context_len must lie in [1, window_len]")
        self.window_len = int(window_len)
        self.context_len = int(context_len)
        self.vocab = np.asarray(vocab, dtype=np.int64)
        self.unigram = np.asarray(unigram, dtype=np.int64)
        self.tables = [(np.asarray(r, dtype=np.int64), np.asarray(c, dtype=np.int64)) for r, c in tables]
        if any((c < 0).any() for _, c in self.tables) or (self.unigram < 0).any():
            raise ValueError("counts must be non-negative")
        self._index()

    @property
    def vocab_size(self):
        return int(self.vocab.size)

    def _index(self):
        # per order: context tuple -> (best next, slice start, slice end)
        self._lookup = []
        for k, (rows, counts) in enumerate(self.tables, start=1):
            table = {}
            if rows.shape[0]:
                ctx = rows[:, :k]
                change = np.any(ctx[1:] != ctx[:-1], axis=1)
                starts = np.concatenate([[0], np.flatnonzero(change) + 1])
                ends = np.append(starts[1:], rows.shape[0])
                best = np.maximum.reduceat(counts, starts)
                # first row hitting the group maximum carries the smallest next id
                hit = counts == np.repeat(best, ends - starts)
                first = np.array([s + int(np.argmax(hit[s:e])) for s, e in zip(starts, ends)])
                keys = map(tuple, ctx[starts].tolist())
                table = dict(zip(keys, zip(rows[first, k].tolist(), starts.tolist(), ends.tolist())))
            self._lookup.append(table)
        self._unigram_best = int(self.vocab[np.argmax(self.unigram)]) if self.vocab.size else 0

    def _match(self, window):
        w = [int(x) for x in window[-self.context_len :]]
        for k in range(self.context_len, 0, -1):
            hit = self._lookup[k - 1].get(tuple(w[-k:]))
            if hit is not None:
                return k, hit
        return 0, None

    def predict_next(self, window) -> int:
        if len(window) != self.window_len:
            raise ValueError(f"window must have length {self.window_len}")
        k, hit = self._match(window)
        return hit[0] if k else self._unigram_best

    def predict_windows(self, windows) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.int64)
        tail = windows[:, -self.context_len :].tolist()
        out = np.empty(len(tail), dtype=np.int64)
        lookups = self._lookup
        c = self.context_len
        for i, w in enumerate(tail):
            for k in range(c, 0, -1):
                hit = lookups[k - 1].get(tuple(w[c - k :]))
                if hit is not None:
                    out[i] = hit[0]
                    break
            else:
                out[i] = self._unigram_best
        return out

    def next_distribution(self, window):
        """Add-one smoothed distribution over ``vocab`` at the back-off order used."""
        k, hit = self._match(window)
        counts = np.zeros(self.vocab.size, dtype=np.float64)
        if k:
            rows, cnt = self.tables[k - 1]
            _, s, e = hit
            counts[np.searchsorted(self.vocab, rows[s:e, k])] = cnt[s:e]
        else:
            counts[:] = self.unigram
        counts += 1.0
        return counts / counts.sum()

    def _arrays(self):
        arrays = {"vocab": self.vocab, "unigram": self.unigram}
        for k, (rows, counts) in enumerate(self.tables, start=1):
            arrays[f"rows{k}"] = rows
            arrays[f"counts{k}"] = counts
        return arrays

    def _header(self):
        return {"variant": self.variant, "window_len": self.window_len, "context_len": self.context_len,
                "vocab_size": self.vocab_size}


def count_ngrams(sequences, k):
    """Unique ``(context_k, next)`` rows and their counts over all sequences."""
    parts = [np.lib.stride_tricks.sliding_window_view(s, k + 1) for s in sequences if len(s) > k]
    if not parts:
        return np.empty((0, k + 1), dtype=np.int64), np.empty(0, dtype=np.int64)
    rows, counts = np.unique(np.concatenate(parts), axis=0, return_counts=True)
    return rows.astype(np.int64), counts.astype(np.int64)


def train_ngram(benign: Corpus, context_len=4, window_len=16) -> NgramPredictor:
    traces = _benign_traces(benign)
    seqs = [t.bbids for t in traces]
    allb = np.concatenate(seqs)
    vocab, unigram = np.unique(allb, return_counts=True)
    tables = [count_ngrams(seqs, k) for k in range(1, context_len + 1)]
    return NgramPredictor(window_len, context_len, vocab, unigram, tables)


# ---------------------------------------------------------------------------
# recurrent


@dataclass(frozen=True)
class RecurrentConfig:
    hidden: int = 32
    embed: int = 16
    lr: float = 0.01
    epochs: int = 3
    window_len: int = 16
    batch_size: int = 128
    seed: int = 0
    # windows sampled per epoch (None = all)
    max_windows: int | None = 20000
    clip: float = 5.0

    def __post_init__(self):
        if self.hidden < 1 or self.embed < 1:
            raise ValueError("hidden and embed must be at least 1")
        if self.window_len < 2:
            raise ValueError("window_len must be at least 2")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")


GRU_PARAMS = ("E", "Wz", "Uz", "bz", "Wr", "Ur", "br", "Wc", "Uc", "bc", "Wo", "bo")


def init_gru(n_in, n_out, embed, hidden, seed):
    """Seeded uniform init in +-sqrt(6 / (fan_in + fan_out)).

    ``n_in`` rows of the embedding include the unknown-symbol row.
    """
    rng = derive_rng(seed, STREAM_INIT)

    def u(shape):
        lim = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-lim, lim, shape)

    p = {"E": u((n_in, embed))}
    for g in "zrc":
        p[f"W{g}"] = u((embed, hidden))
        p[f"U{g}"] = u((hidden, hidden))
        p[f"b{g}"] = np.zeros(hidden)
    p["Wo"] = u((hidden, n_out))
    p["bo"] = np.zeros(n_out)
    return p


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gru_forward(p, X):
    """Run the GRU over index windows ``X`` (B, L); returns probs and cache."""
    B, L = X.shape
    h = np.zeros((B, p["Uz"].shape[0]))
    cache = []
    for t in range(L):
        x = p["E"][X[:, t]]
        z = _sigmoid(x @ p["Wz"] + h @ p["Uz"] + p["bz"])
        r = _sigmoid(x @ p["Wr"] + h @ p["Ur"] + p["br"])
        c = np.tanh(x @ p["Wc"] + (r * h) @ p["Uc"] + p["bc"])
        cache.append((x, h, z, r, c))
        h = (1.0 - z) * h + z * c
    probs = softmax(h @ p["Wo"] + p["bo"])
    return probs, (h, cache)


def gru_loss_and_grads(p, X, y):
    """Mean cross-entropy of the last-step prediction and its exact gradient."""
    X = np.asarray(X)
    B = X.shape[0]
    probs, (hL, cache) = gru_forward(p, X)
    loss = -np.mean(np.log(probs[np.arange(B), y] + 1e-300))
    g = {k: np.zeros_like(v) for k, v in p.items()}
    d = probs.copy()
    d[np.arange(B), y] -= 1.0
    d /= B
    g["Wo"] = hL.T @ d
    g["bo"] = d.sum(axis=0)
    dh = d @ p["Wo"].T
    for t in range(X.shape[1] - 1, -1, -1):
        x, hp, z, r, c = cache[t]
        dc = dh * z
        dz = dh * (c - hp)
        dhp = dh * (1.0 - z)
        dac = dc * (1.0 - c * c)
        g["Wc"] += x.T @ dac
        g["Uc"] += (r * hp).T @ dac
        g["bc"] += dac.sum(axis=0)
        drh = dac @ p["Uc"].T
        dhp += drh * r
        dar = drh * hp * r * (1.0 - r)
        g["Wr"] += x.T @ dar
        g["Ur"] += hp.T @ dar
        g["br"] += dar.sum(axis=0)
        dhp += dar @ p["Ur"].T
        daz = dz * z * (1.0 - z)
        g["Wz"] += x.T @ daz
        g["Uz"] += hp.T @ daz
        g["bz"] += daz.sum(axis=0)
        dhp += daz @ p["Uz"].T
        dx = daz @ p["Wz"].T + dar @ p["Wr"].T + dac @ p["Wc"].T
        np.add.at(g["E"], X[:, t], dx)
        dh = dhp
    return loss, g


class RecurrentPredictor:
    """GRU next-BBID predictor; BBIDs outside ``vocab`` share one unknown row."""

    variant = "recurrent"

    def __init__(self, window_len, vocab, params, meta=None):
        if window_len < 2:
            raise ValueError("window_len must be at least 2")
        self.window_len = int(window_len)
        self.vocab = np.asarray(vocab, dtype=np.int64)
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in GRU_PARAMS}
        if not all(np.isfinite(v).all() for v in self.params.values()):
            raise ValueError("recurrent weights must be finite")
        self.meta = dict(meta or {})

    @property
    def vocab_size(self):
        return int(self.vocab.size)

    @property
    def hidden(self):
        return int(self.params["Uz"].shape[0])

    def encode(self, bbids):
        bbids = np.asarray(bbids, dtype=np.int64)
        idx = np.searchsorted(self.vocab, bbids)
        idx = np.minimum(idx, self.vocab.size - 1)
        known = self.vocab[idx] == bbids
        return np.where(known, idx, self.vocab.size)

    def probabilities(self, windows):
        windows = np.atleast_2d(np.asarray(windows, dtype=np.int64))
        out = []
        for s in range(0, windows.shape[0], 4096):
            probs, _ = gru_forward(self.params, self.encode(windows[s : s + 4096]))
            out.append(probs)
        return np.concatenate(out) if out else np.empty((0, self.vocab.size))

    def predict_windows(self, windows):
        probs = self.probabilities(windows)
        # argmax returns the first maximum, i.e. the smallest bbid on ties
        return self.vocab[np.argmax(probs, axis=1)]

    def predict_next(self, window) -> int:
        if len(window) != self.window_len:
            raise ValueError(f"window must have length {self.window_len}")
        return int(self.predict_windows([window])[0])

    def next_distribution(self, window):
        return self.probabilities([window])[0]

    def _arrays(self):
        return {"vocab": self.vocab, **self.params}

    def _header(self):
        return {"variant": self.variant, "window_len": self.window_len, "hidden": self.hidden,
                "embed": int(self.params["E"].shape[1]), "vocab_size": self.vocab_size, "meta": self.meta}


def _training_windows(traces, L, indirect_only=True):
    X, y = [], []
    for t in traces:
        if len(t) <= L:
            continue
        pos = np.arange(L, len(t))
        if indirect_only:
            pos = pos[t.indirect[L:]]
        if pos.size:
            X.append(np.lib.stride_tricks.sliding_window_view(t.bbids, L)[pos - L])
            y.append(t.bbids[pos])
    if not X:
        raise ValueError("no training windows: traces shorter than window_len")
    return np.concatenate(X), np.concatenate(y)


def train_recurrent(benign: Corpus, config: RecurrentConfig = RecurrentConfig()) -> RecurrentPredictor:
    """Adam on last-step cross-entropy over windows ending at indirect transfers."""
    traces = _benign_traces(benign)
    L = config.window_len
    vocab = np.unique(np.concatenate([t.bbids for t in traces]))
    Xb, yb = _training_windows(traces, L)
    model = RecurrentPredictor(L, vocab, init_gru(vocab.size + 1, vocab.size, config.embed, config.hidden, config.seed))
    X = model.encode(Xb)
    y = np.searchsorted(vocab, yb)

    p = model.params
    m = {k: np.zeros_like(v) for k, v in p.items()}
    v = {k: np.zeros_like(v) for k, v in p.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = []
    for epoch in range(1, config.epochs + 1):
        rng = derive_rng(config.seed, STREAM_SHUFFLE, epoch)
        order = rng.permutation(X.shape[0])
        if config.max_windows is not None:
            order = order[: config.max_windows]
        total, n = 0.0, 0
        for s in range(0, order.size, config.batch_size):
            batch = order[s : s + config.batch_size]
            loss, g = gru_loss_and_grads(p, X[batch], y[batch])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            norm = np.sqrt(sum(float((gg * gg).sum()) for gg in g.values()))
            scale = min(1.0, config.clip / (norm + 1e-12))
            step += 1
            for k in p:
                gk = g[k] * scale
                m[k] = b1 * m[k] + (1 - b1) * gk
                v[k] = b2 * v[k] + (1 - b2) * gk * gk
                mh = m[k] / (1 - b1**step)
                vh = v[k] / (1 - b2**step)
                p[k] -= config.lr * mh / (np.sqrt(vh) + eps)
            total += loss * batch.size
            n += batch.size
        epoch_loss = total / max(n, 1)
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(epoch, epoch_loss)
        history.append(epoch_loss)
        log.info("recurrent epoch %d loss %.4f", epoch, epoch_loss)
    model.meta = {"epochs": config.epochs, "lr": config.lr, "seed": config.seed, "loss_history": history}
    return model


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True, eq=False)
class PredictionOutcomes:
    """One entry per indirect-transfer offset ``>= window_len``."""

    trace_id: str
    offsets: np.ndarray
    predicted: np.ndarray
    actual: np.ndarray

    @property
    def correct(self) -> np.ndarray:
        return self.predicted == self.actual

    def __len__(self):
        return int(self.offsets.size)

    @property
    def outcomes(self):
        return [
            (int(o), int(p), int(a), bool(p == a))
            for o, p, a in zip(self.offsets, self.predicted, self.actual)
        ]

    @classmethod
    def from_correct(cls, trace_id, correct, offsets=None):
        """Outcomes carrying only correctness (actual=1, predicted=1 or 0)."""
        correct = np.asarray(correct, dtype=bool)
        offsets = np.arange(correct.size) if offsets is None else np.asarray(offsets)
        return cls(trace_id, offsets, correct.astype(np.int64), np.ones(correct.size, dtype=np.int64))


def evaluate_trace(model, trace: ControlFlowTrace) -> PredictionOutcomes:
    L = model.window_len
    if len(trace) < L + 1:
        raise ValueError(f"trace {trace.id!r} has {len(trace)} events; need at least {L + 1}")
    pos = np.arange(L, len(trace))[trace.indirect[L:]]
    if pos.size:
        windows = np.lib.stride_tricks.sliding_window_view(trace.bbids, L)[pos - L]
        predicted = model.predict_windows(windows)
    else:
        predicted = np.empty(0, dtype=np.int64)
    return PredictionOutcomes(trace.id, pos, predicted, trace.bbids[pos].copy())


def accuracy(outcomes: PredictionOutcomes) -> float:
    if len(outcomes) == 0:
        raise ValueError("no indirect positions")
    return float(np.count_nonzero(outcomes.correct)) / len(outcomes)


def label_trace(outcomes: PredictionOutcomes, threshold: float):
    """``("anomalous", acc)`` when accuracy falls strictly below ``threshold``."""
    acc = accuracy(outcomes)
    return ("anomalous" if acc < threshold else "normal"), acc


def calibrate_threshold(model, benign_validation: Corpus, margin=0.02) -> float:
    """Minimum accuracy over held-out benign traces minus ``margin``."""
    accs = [accuracy(evaluate_trace(model, t)) for t in _benign_traces(benign_validation)]
    return min(accs) - margin


# ---------------------------------------------------------------------------
# persistence


def save_predictor(model, path):
    blob = _binfmt.pack(PRED_MAGIC, {"version": FORMAT_VERSION, **model._header()}, model._arrays())
    Path(path).write_bytes(blob)


def load_predictor(path):
    header, arrays = _binfmt.unpack(Path(path).read_bytes(), PRED_MAGIC, "predictor model")
    if header.get("version") != FORMAT_VERSION:
        raise _binfmt.ModelFormatError(f"unsupported predictor version {header.get('version')!r}")
    if header["variant"] == "ngram":
        c = header["context_len"]
        tables = [(arrays[f"rows{k}"], arrays[f"counts{k}"]) for k in range(1, c + 1)]
        return NgramPredictor(header["window_len"], c, arrays["vocab"], arrays["unigram"], tables)
    if header["variant"] == "recurrent":
        return RecurrentPredictor(header["window_len"], arrays["vocab"], arrays, header.get("meta"))
    raise _binfmt.ModelFormatError(f"unknown predictor variant {header['variant']!r}")
