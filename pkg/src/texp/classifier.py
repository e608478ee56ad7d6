"""Two-class image classifier: flatten -> dense -> ReLU -> dense -> softmax.

Trained from scratch with mini-batch SGD + momentum and early stopping on
validation loss. Pixels are scaled to [0, 1] and centered by the per-pixel
mean of the fitting split; that mean (``mu``) is stored with the weights. Anything exposing ``input_shape`` and ``predict_proba`` can
be explained; ``ExternalClassifier`` adapts a third-party program speaking
the batch-file protocol (one image path per line in, one
``"p_benign p_malicious"`` line per image out).
"""

from __future__ import annotations

import logging
import shlex
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _binfmt
from ._seeding import STREAM_INIT, STREAM_SHUFFLE, STREAM_SPLIT, derive_rng
from .imaging import ImageBuffer, read_image, write_image
from .traces import LABELS

log = logging.getLogger(__name__)

CLF_MAGIC = b"TEXP-CLF1"
FORMAT_VERSION = 1
CLASSES = LABELS  # index 0 benign, 1 malicious
PARAM_NAMES = ("mu", "W1", "b1", "W2", "b2")


class ClassifierError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 50
    patience: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    validation_fraction: float = 0.2
    hidden: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("max_epochs, batch_size and hidden must be positive")
        if not 0 < self.patience < self.max_epochs:
            raise ValueError("patience must lie in (0, max_epochs)")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.lr <= 0 or not 0.0 <= self.momentum < 1.0:
            raise ValueError("lr must be positive and momentum in [0, 1)")


def as_batch(images) -> np.ndarray:
    """Stack ImageBuffers (or pass through an array) as uint8 ``(n, H, W[, 3])``."""
    if isinstance(images, np.ndarray):
        return images
    return np.stack([im.pixels if isinstance(im, ImageBuffer) else np.asarray(im) for im in images])


def image_shape(pixels: np.ndarray):
    """``(W, H, channels)`` for one image's pixel array."""
    return (pixels.shape[1], pixels.shape[0], 1 if pixels.ndim == 2 else pixels.shape[2])


def _flatten(batch):
    return batch.reshape(batch.shape[0], -1).astype(np.float64) / 255.0


def mlp_forward(p, X):
    a1 = X @ p["W1"] + p["b1"]
    h = np.maximum(a1, 0.0)
    z = h @ p["W2"] + p["b2"]
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True), (a1, h)


def mlp_loss_and_grads(p, X, y):
    """Mean cross-entropy and exact gradients for flattened inputs ``X``."""
    n = X.shape[0]
    probs, (a1, h) = mlp_forward(p, X)
    loss = -np.mean(np.log(probs[np.arange(n), y] + 1e-300))
    d = probs.copy()
    d[np.arange(n), y] -= 1.0
    d /= n
    g = {"W2": h.T @ d, "b2": d.sum(axis=0)}
    dh = (d @ p["W2"].T) * (a1 > 0)
    g["W1"] = X.T @ dh
    g["b1"] = dh.sum(axis=0)
    return loss, g


def init_mlp(n_in, hidden, seed):
    rng = derive_rng(seed, STREAM_INIT)
    l1 = np.sqrt(6.0 / (n_in + hidden))
    l2 = np.sqrt(6.0 / (hidden + 2))
    return {
        "W1": rng.uniform(-l1, l1, (n_in, hidden)),
        "b1": np.zeros(hidden),
        "W2": rng.uniform(-l2, l2, (hidden, 2)),
        "b2": np.zeros(2),
    }


@dataclass(eq=False)
class ClassifierModel:
    input_shape: tuple  # (W, H, channels)
    params: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        n_in = int(np.prod(self.input_shape))
        p = {k: np.asarray(self.params[k], dtype=np.float64) for k in PARAM_NAMES}
        h = p["W1"].shape[1] if p["W1"].ndim == 2 else -1
        shapes = {"mu": (n_in,), "W1": (n_in, h), "b1": (h,), "W2": (h, 2), "b2": (2,)}
        if any(p[k].shape != s for k, s in shapes.items()):
            raise ClassifierError("weight shapes inconsistent with input_shape")
        if not all(np.isfinite(v).all() for v in p.values()):
            raise ClassifierError("classifier weights must be finite")
        self.params = p

    @property
    def hidden(self):
        return self.params["W1"].shape[1]

    def _check(self, batch):
        shape = image_shape(batch[0]) if batch.shape[0] else self.input_shape
        if shape != self.input_shape:
            raise ClassifierError(f"image shape {shape} does not match model input {self.input_shape}")

    def predict_proba(self, images) -> np.ndarray:
        """``(n, 2)`` class probabilities (benign, malicious)."""
        batch = as_batch(images)
        if batch.shape[0] == 0:
            return np.empty((0, 2))
        self._check(batch)
        out = []
        for s in range(0, batch.shape[0], 256):
            probs, _ = mlp_forward(self.params, _flatten(batch[s : s + 256]) - self.params["mu"])
            out.append(probs)
        return np.concatenate(out)


def predict(model, image) -> tuple:
    """``(p_benign, p_malicious)`` for a single image."""
    p = model.predict_proba([image])[0]
    return float(p[0]), float(p[1])


def _mean_loss(p, X, y):
    if X.shape[0] == 0:
        return float("nan")
    probs, _ = mlp_forward(p, X)
    return float(-np.mean(np.log(probs[np.arange(X.shape[0]), y] + 1e-300)))


def _validation_split(y, fraction, seed):
    rng = derive_rng(seed, STREAM_SPLIT)
    val = []
    for c in (0, 1):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(idx.size)]
        k = max(1, int(round(fraction * idx.size)))
        val.extend(idx[:k].tolist())
    val = np.array(sorted(val))
    train = np.setdiff1d(np.arange(y.size), val)
    return train, val


def encode_labels(labels):
    try:
        return np.array([CLASSES.index(l) if isinstance(l, str) else int(l) for l in labels], dtype=np.int64)
    except ValueError:
        raise ClassifierError(f"labels must be among {CLASSES}") from None


def train_classifier(images, labels, config: TrainConfig = TrainConfig()) -> ClassifierModel:
    """Train and return the checkpoint with the lowest validation loss."""
    batch = as_batch(images)
    y = encode_labels(labels)
    if batch.shape[0] != y.size:
        raise ClassifierError("images and labels differ in length")
    if batch.ndim not in (3, 4):
        raise ClassifierError("images must be 2-d gray or RGB arrays of one shape")
    counts = np.bincount(y, minlength=2)
    if counts.min() < 2:
        raise ClassifierError(f"need at least 2 samples per class, got {counts.tolist()}")
    shape = image_shape(batch[0])
    X = _flatten(batch)

    tr, va = _validation_split(y, config.validation_fraction, config.seed)
    # per-pixel centering on the fitting split; stored with the model
    mu = X[tr].mean(axis=0)
    X = X - mu
    Xt, yt, Xv, yv = X[tr], y[tr], X[va], y[va]
    p = init_mlp(X.shape[1], config.hidden, config.seed)
    vel = {k: np.zeros_like(v) for k, v in p.items()}

    best = {k: v.copy() for k, v in p.items()}
    best_loss, best_epoch, since = np.inf, 0, 0
    history = []
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = derive_rng(config.seed, STREAM_SHUFFLE, epoch).permutation(yt.size)
        for s in range(0, order.size, config.batch_size):
            b = order[s : s + config.batch_size]
            loss, g = mlp_loss_and_grads(p, Xt[b], yt[b])
            if not np.isfinite(loss):
                raise ClassifierError(f"non-finite training loss in epoch {epoch}")
            for k in p:
                vel[k] = config.momentum * vel[k] - config.lr * g[k]
                p[k] += vel[k]
        train_loss = _mean_loss(p, Xt, yt)
        val_loss = _mean_loss(p, Xv, yv)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise ClassifierError(f"non-finite loss in epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.debug("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if val_loss < best_loss:
            best_loss, best_epoch, since = val_loss, epoch, 0
            best = {k: v.copy() for k, v in p.items()}
        else:
            since += 1
            if since >= config.patience:
                break

    meta = {
        "epochs_run": epoch,
        "best_epoch": best_epoch,
        "best_val_loss": best_loss,
        "seed": config.seed,
        "history": history,
    }
    return ClassifierModel(shape, dict(best, mu=mu), meta)


def accuracy(model, images, labels) -> float:
    y = encode_labels(labels)
    probs = model.predict_proba(as_batch(images))
    return float(np.mean(np.argmax(probs, axis=1) == y))


# ---------------------------------------------------------------------------
# persistence


def save_model(model: ClassifierModel, path):
    header = {
        "version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "hidden": int(model.hidden),
        "meta": model.meta,
    }
    Path(path).write_bytes(_binfmt.pack(CLF_MAGIC, header, model.params))


def load_model(path) -> ClassifierModel:
    try:
        header, arrays = _binfmt.unpack(Path(path).read_bytes(), CLF_MAGIC, "classifier model")
    except _binfmt.ModelFormatError as exc:
        raise ClassifierError(str(exc)) from None
    if header.get("version") != FORMAT_VERSION:
        raise ClassifierError(f"unsupported classifier version {header.get('version')!r}")
    missing = set(PARAM_NAMES) - set(arrays)
    if missing:
        raise ClassifierError(f"classifier file lacks arrays {sorted(missing)}")
    return ClassifierModel(tuple(header["input_shape"]), arrays, header.get("meta", {}))


# ---------------------------------------------------------------------------
# batch-file protocol


def serve_batch(model, list_path, out=None):
    """Answer one protocol request: read image paths, write probability lines."""
    out = out or sys.stdout
    paths = [l.strip() for l in Path(list_path).read_text().splitlines() if l.strip()]
    images = [read_image(p) for p in paths]
    for pb, pm in model.predict_proba(images).tolist() if images else []:
        out.write(f"{pb!r} {pm!r}\n")


class ExternalClassifier:
    """Black-box classifier run as ``command <list-file>`` per batch.

    The command must print one ``"p_benign p_malicious"`` line per listed
    image, in order.
    """

    def __init__(self, command, input_shape, timeout=600):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.input_shape = tuple(input_shape)
        self.timeout = timeout

    def predict_proba(self, images) -> np.ndarray:
        batch = as_batch(images)
        if batch.shape[0] == 0:
            return np.empty((0, 2))
        with tempfile.TemporaryDirectory(prefix="texp-ext-") as tmp:
            tmp = Path(tmp)
            paths = []
            for i, px in enumerate(batch):
                suffix = ".pgm" if px.ndim == 2 else ".ppm"
                p = write_image(tmp / f"{i:06d}{suffix}", ImageBuffer(px), encoder="external")
                paths.append(str(p))
            listing = tmp / "batch.txt"
            listing.write_text("\n".join(paths) + "\n")
            res = subprocess.run(
                self.command + [str(listing)], capture_output=True, text=True, timeout=self.timeout
            )
        if res.returncode != 0:
            raise ClassifierError(f"external classifier failed ({res.returncode}): {res.stderr.strip()}")
        rows = [l.split() for l in res.stdout.splitlines() if l.strip()]
        if len(rows) != batch.shape[0] or any(len(r) != 2 for r in rows):
            raise ClassifierError(
                f"external classifier returned {len(rows)} lines for {batch.shape[0]} images"
            )
        probs = np.array(rows, dtype=np.float64)
        if (probs < 0).any() or (probs > 1).any():
            raise ClassifierError("external classifier produced probabilities outside [0, 1]")
        return probs
