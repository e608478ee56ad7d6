"""Local surrogate explanations of single image predictions.

Grid superpixels are switched off at random, the black-box classifier scores
each perturbed image, and a weighted ridge regression on the on/off masks
yields one coefficient per superpixel. Positive coefficients support the
explained class (rendered green), negative ones contradict it (red).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ._seeding import STREAM_MASKS, derive_rng
from .imaging import BASELINES, GRAY, PAD_RGB, ImageBuffer, PixelProvenanceMap

# coefficients at or below this magnitude carry no attribution
ZERO_TOL = 1e-12


class SurrogateError(ValueError):
    pass


@dataclass(frozen=True)
class Segmentation:
    """Disjoint superpixels (flat row-major pixel indices) covering every
    non-padding pixel."""

    width: int
    height: int
    superpixels: tuple

    def __post_init__(self):
        sps = tuple(np.asarray(s, dtype=np.int64) for s in self.superpixels)
        object.__setattr__(self, "superpixels", sps)

    def __len__(self):
        return len(self.superpixels)

    def labels(self) -> np.ndarray:
        """Superpixel index per pixel, -1 for uncovered (padding) pixels."""
        lab = np.full(self.width * self.height, -1, dtype=np.int64)
        for j, s in enumerate(self.superpixels):
            lab[s] = j
        return lab


def segment_grid(image: ImageBuffer, provenance: PixelProvenanceMap | None, cell=8) -> Segmentation:
    """Axis-aligned ``cell x cell`` blocks in row-major order, minus padding."""
    if cell < 1:
        raise ValueError("cell must be at least 1")
    H, W = image.height, image.width
    if provenance is not None and (provenance.width, provenance.height) != (W, H):
        raise ValueError("provenance does not match image dimensions")
    pad = provenance.padding if provenance is not None else np.zeros(W * H, dtype=bool)
    flat = np.arange(W * H).reshape(H, W)
    sps = []
    for r in range(0, H, cell):
        for c in range(0, W, cell):
            idx = flat[r : r + cell, c : c + cell].ravel()
            idx = idx[~pad[idx]]
            if idx.size:
                sps.append(idx)
    return Segmentation(W, H, tuple(sps))


def sample_masks(K, n_samples, p_keep=0.5, seed=0) -> np.ndarray:
    """``(n_samples, K)`` 0/1 masks; row 0 keeps everything.

    Row ``i`` is drawn from its own child stream so any subset of rows can be
    regenerated independently.
    """
    if K < 1:
        raise ValueError("need at least one superpixel")
    if n_samples < K + 2:
        raise ValueError(f"n_samples must be at least K + 2 = {K + 2}, got {n_samples}")
    if not 0.0 <= p_keep <= 1.0:
        raise ValueError("p_keep must lie in [0, 1]")
    masks = np.ones((n_samples, K), dtype=np.int8)
    for i in range(1, n_samples):
        masks[i] = mask_row(K, p_keep, seed, i)
    return masks


def mask_row(K, p_keep, seed, i):
    rng = derive_rng(seed, STREAM_MASKS, i)
    row = (rng.random(K) < p_keep).astype(np.int8)
    if not row.any():
        row[int(rng.integers(K))] = 1
    return row


def default_baseline(image: ImageBuffer, encoder=None):
    if encoder is not None:
        return BASELINES[encoder]
    return GRAY if image.channels == 1 else PAD_RGB


def perturb_batch(pixels: np.ndarray, segmentation: Segmentation, masks: np.ndarray, baseline) -> np.ndarray:
    masks = np.atleast_2d(masks)
    if masks.shape[1] != len(segmentation):
        raise ValueError(f"mask length {masks.shape[1]} != {len(segmentation)} superpixels")
    H, W = pixels.shape[:2]
    flat = pixels.reshape(H * W, -1)
    lab = segmentation.labels()
    covered = lab >= 0
    out = np.repeat(flat[None], masks.shape[0], axis=0)
    base = np.asarray(baseline, dtype=np.uint8).reshape(-1)
    # pixel p is removed in sample i iff masks[i, lab[p]] == 0
    off = np.zeros((masks.shape[0], H * W), dtype=bool)
    off[:, covered] = masks[:, lab[covered]] == 0
    out[off] = base
    return out.reshape((masks.shape[0],) + pixels.shape)


def perturb(image: ImageBuffer, segmentation: Segmentation, mask, baseline) -> ImageBuffer:
    """Replace every superpixel with ``mask[j] == 0`` by ``baseline``."""
    return ImageBuffer(perturb_batch(image.pixels, segmentation, np.asarray(mask)[None], baseline)[0])


def cosine_distance(masks):
    """Cosine distance of binary masks to the all-ones mask (1 for all zeros)."""
    masks = np.atleast_2d(masks)
    return 1.0 - np.sqrt(masks.sum(axis=1) / masks.shape[1])


def kernel_weight(mask, sigma=0.25):
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError("mask must be non-empty")
    d = cosine_distance(mask)
    w = np.exp(-(d**2) / sigma**2)
    return float(w[0]) if mask.ndim == 1 else w


def fit_surrogate(masks, weights, targets, lam=1.0):
    """Weighted ridge with an unpenalised intercept via the normal equations.

    Returns ``(intercept, coefficients, r2)`` where ``r2`` is the weighted
    coefficient of determination of the fit.
    """
    M = np.asarray(masks, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    n, K = M.shape
    if n < K + 2:
        raise SurrogateError(f"need at least K + 2 = {K + 2} samples, got {n}")
    if (w <= 0).any():
        raise SurrogateError("weights must be positive")
    if lam < 0:
        raise SurrogateError("lambda must be non-negative")
    Z = np.hstack([np.ones((n, 1)), M])
    ZtW = Z.T * w
    A = ZtW @ Z
    A[np.arange(1, K + 1), np.arange(1, K + 1)] += lam
    b = ZtW @ y
    if lam == 0 and np.linalg.cond(A) > 1e12:
        raise SurrogateError("singular surrogate system at lambda=0; use lambda > 0")
    try:
        beta = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        raise SurrogateError("singular surrogate system; use lambda > 0") from None
    resid = y - Z @ beta
    ybar = np.sum(w * y) / np.sum(w)
    ss_tot = float(np.sum(w * (y - ybar) ** 2))
    ss_res = float(np.sum(w * resid**2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res <= 1e-24 else 0.0)
    return float(beta[0]), beta[1:], r2


def select_top_k(coefficients, k):
    """Indices by descending ``|coef|``, ties to the smaller index, zeros skipped."""
    c = np.abs(np.asarray(coefficients, dtype=np.float64))
    order = np.lexsort((np.arange(c.size), -c))
    return [int(j) for j in order if c[j] > ZERO_TOL][:k]


@dataclass(frozen=True)
class ExplainConfig:
    cell: int = 8
    n_samples: int = 1000
    p_keep: float = 0.5
    sigma: float = 0.25
    lam: float = 1.0
    top_k: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.cell < 1 or self.top_k < 1:
            raise ValueError("cell and top_k must be at least 1")
        if self.sigma <= 0 or self.lam < 0:
            raise ValueError("sigma must be positive and lambda non-negative")
        if not 0.0 <= self.p_keep <= 1.0:
            raise ValueError("p_keep must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class Explanation:
    explained_class: int
    intercept: float
    coefficients: np.ndarray
    top_k: list
    config: dict
    local_fit_r2: float
    base_probability: float = float("nan")

    def to_json(self):
        return {
            "explained_class": self.explained_class,
            "intercept": self.intercept,
            "coefficients": [float(c) for c in self.coefficients],
            "top_k": list(self.top_k),
            "r2": self.local_fit_r2,
            "base_probability": self.base_probability,
            "config": dict(self.config),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            int(obj["explained_class"]),
            float(obj["intercept"]),
            np.asarray(obj["coefficients"], dtype=np.float64),
            [int(j) for j in obj["top_k"]],
            dict(obj.get("config", {})),
            float(obj["r2"]),
            float(obj.get("base_probability", "nan")),
        )

    def __eq__(self, other):
        if not isinstance(other, Explanation):
            return NotImplemented
        return self.to_json() == other.to_json()


def explain(
    image: ImageBuffer,
    provenance: PixelProvenanceMap | None,
    model,
    config: ExplainConfig = ExplainConfig(),
    explained_class=None,
    baseline=None,
    segmentation: Segmentation | None = None,
    masks: np.ndarray | None = None,
    chunk=250,
) -> Explanation:
    """Segment, sample masks, perturb, score, weight, and fit the surrogate."""
    seg = segmentation if segmentation is not None else segment_grid(image, provenance, config.cell)
    K = len(seg)
    base = baseline if baseline is not None else default_baseline(image)
    p0 = model.predict_proba(image.pixels[None])[0]
    cls = int(np.argmax(p0)) if explained_class is None else int(explained_class)
    if masks is None:
        masks = sample_masks(K, config.n_samples, config.p_keep, config.seed)
    targets = np.empty(masks.shape[0])
    for s in range(0, masks.shape[0], chunk):
        batch = perturb_batch(image.pixels, seg, masks[s : s + chunk], base)
        targets[s : s + chunk] = model.predict_proba(batch)[:, cls]
    weights = kernel_weight(masks, config.sigma)
    intercept, coef, r2 = fit_surrogate(masks, weights, targets, config.lam)
    cfg = asdict(config)
    cfg["baseline"] = np.asarray(base).tolist()
    return Explanation(cls, intercept, coef, select_top_k(coef, config.top_k), cfg, r2, float(p0[cls]))


def render_overlay(image: ImageBuffer, segmentation: Segmentation, explanation: Explanation, alpha=0.5) -> ImageBuffer:
    """Blend top-k superpixels toward green (support) or red (contradiction).

    Blend strength is ``alpha * |coef| / max |coef|`` over the top-k set; only
    the green channel moves for support and only the red one for contradiction.
    """
    if len(explanation.coefficients) != len(segmentation):
        raise ValueError(
            f"explanation has {len(explanation.coefficients)} coefficients for {len(segmentation)} superpixels"
        )
    rgb = image.to_rgb().pixels.reshape(-1, 3).astype(np.float64)
    coef = np.asarray(explanation.coefficients)
    top = list(explanation.top_k)
    peak = max((abs(coef[j]) for j in top), default=0.0)
    if peak > ZERO_TOL:
        for j in top:
            s = alpha * abs(coef[j]) / peak
            ch = 1 if coef[j] > 0 else 0
            px = segmentation.superpixels[j]
            rgb[px, ch] += s * (255.0 - rgb[px, ch])
    return ImageBuffer(np.rint(rgb).clip(0, 255).astype(np.uint8).reshape(image.height, image.width, 3))
