"""Trace-to-image encoders with exact pixel provenance, plus PGM/PPM I/O.

Every encoder returns ``(ImageBuffer, PixelProvenanceMap)``. The provenance
map tags each row-major pixel as a trace offset, an API id, or padding, which
is what lets explanations be mapped back onto trace content.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

WHITE, BLACK, GRAY = 255, 0, 128
PAD_GRAY = GRAY
PAD_RGB = (0, 0, 0)
DEFAULT_CAP = 65536

TAG_PAD, TAG_OFF, TAG_API = 0, 1, 2
_TAG_NAMES = {TAG_PAD: "pad", TAG_OFF: "off", TAG_API: "api"}

# replacement value used by the explainer when a region is "removed"
BASELINES = {
    "prediction_bitmap": GRAY,
    "api_existence": GRAY,
    "api_frequency": GRAY,
    "api_sequence": PAD_RGB,
}


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Row-major uint8 pixels, shape ``(H, W)`` or ``(H, W, 3)``."""

    pixels: np.ndarray
    comment: str = ""

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.uint8)
        if px.ndim == 3 and px.shape[2] == 1:
            px = px[:, :, 0]
        if px.ndim not in (2, 3) or (px.ndim == 3 and px.shape[2] != 3):
            raise ValueError(f"unsupported pixel array shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return 1 if self.pixels.ndim == 2 else 3

    @property
    def shape(self):
        return (self.width, self.height, self.channels)

    def tobytes(self):
        return self.pixels.tobytes()

    def to_rgb(self) -> "ImageBuffer":
        if self.channels == 3:
            return self
        return ImageBuffer(np.repeat(self.pixels[:, :, None], 3, axis=2))

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class PixelProvenanceMap:
    """Per-pixel tag: trace offset, API id, or padding (row-major)."""

    width: int
    height: int
    tags: np.ndarray  # TAG_* codes
    values: np.ndarray  # offset or api id; -1 for padding

    def __post_init__(self):
        tags = np.array(self.tags, dtype=np.int8).ravel()
        values = np.array(self.values, dtype=np.int64).ravel()
        if tags.size != self.width * self.height or values.size != tags.size:
            raise ValueError("provenance size must equal width*height")
        if not np.isin(tags, (TAG_PAD, TAG_OFF, TAG_API)).all():
            raise ValueError("unknown provenance tag")
        values = np.where(tags == TAG_PAD, -1, values)
        if (values[tags != TAG_PAD] < 0).any():
            raise ValueError("provenance values must be non-negative")
        tags.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "tags", tags)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return int(self.tags.size)

    def __eq__(self, other):
        if not isinstance(other, PixelProvenanceMap):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and np.array_equal(
            self.tags, other.tags) and np.array_equal(self.values, other.values)

    def tag(self, i):
        t = int(self.tags[i])
        return (_TAG_NAMES[t], None if t == TAG_PAD else int(self.values[i]))

    @property
    def padding(self) -> np.ndarray:
        return self.tags == TAG_PAD

    def to_json(self):
        out = []
        for t, v in zip(self.tags.tolist(), self.values.tolist()):
            out.append({"t": "pad"} if t == TAG_PAD else {"t": _TAG_NAMES[t], "v": v})
        return {"width": self.width, "height": self.height, "tags": out}

    @classmethod
    def from_json(cls, obj):
        codes = {"pad": TAG_PAD, "off": TAG_OFF, "api": TAG_API}
        tags = [codes[e["t"]] for e in obj["tags"]]
        values = [e.get("v", -1) for e in obj["tags"]]
        return cls(int(obj["width"]), int(obj["height"]), tags, values)


def _layout(n, width, height, cap, what):
    if n == 0:
        raise ValueError(f"cannot encode empty {what}")
    if width < 1:
        raise ValueError("width must be at least 1")
    if n > cap:
        log.warning("truncating %d %s to the first %d", n, what, cap)
        n = cap
    rows = math.ceil(n / width)
    if height is None:
        height = rows
    elif height < rows:
        raise ValueError(f"{n} {what} need {rows} rows at width {width}; height {height} is too small")
    return n, height


def encode_prediction_bitmap(outcomes, width=64, height=None, cap=DEFAULT_CAP):
    """White for correct predictions, black for wrong ones, gray padding.

    ``height`` pads the bitmap to a fixed number of rows so that a corpus of
    traces yields images of one shape.
    """
    correct = np.asarray(outcomes.correct, dtype=bool)
    n, height = _layout(correct.size, width, height, cap, "outcomes")
    size = width * height
    px = np.full(size, PAD_GRAY, dtype=np.uint8)
    px[:n] = np.where(correct[:n], WHITE, BLACK)
    tags = np.full(size, TAG_PAD, dtype=np.int8)
    tags[:n] = TAG_OFF
    values = np.full(size, -1, dtype=np.int64)
    values[:n] = np.asarray(outcomes.offsets)[:n]
    return ImageBuffer(px.reshape(height, width)), PixelProvenanceMap(width, height, tags, values)


def fnv1a32(data: bytes) -> int:
    h = 0x811C9DC5
    for b in data:
        h = ((h ^ b) * 0x01000193) & 0xFFFFFFFF
    return h


def rgb_from_hash(h: int):
    rgb = ((h >> 16) & 255, (h >> 8) & 255, h & 255)
    # black is reserved for padding
    return (64, 64, 64) if rgb == (0, 0, 0) else rgb


def api_color(name: str):
    if not name:
        raise ValueError("api name must be non-empty")
    return rgb_from_hash(fnv1a32(name.encode("utf-8")))


def palette(vocab):
    """``(|vocab|, 3)`` uint8 color table."""
    return np.array([api_color(n) for n in vocab], dtype=np.uint8).reshape(-1, 3)


def _report_collisions(names, colors):
    seen = {}
    for name, c in zip(names, map(tuple, colors.tolist())):
        other = seen.setdefault(c, name)
        if other != name:
            log.warning("api color collision: %r and %r both map to %s", other, name, c)


def encode_api_sequence(trace, width=64, height=None, cap=DEFAULT_CAP):
    """One pixel per call, colored by the API name; black padding."""
    n, height = _layout(len(trace), width, height, cap, "calls")
    colors = palette(trace.vocab)
    used = np.unique(trace.calls[:n])
    _report_collisions([trace.vocab[i] for i in used], colors[used])
    size = width * height
    px = np.zeros((size, 3), dtype=np.uint8)
    px[:n] = colors[trace.calls[:n]]
    tags = np.full(size, TAG_PAD, dtype=np.int8)
    tags[:n] = TAG_OFF
    values = np.full(size, -1, dtype=np.int64)
    values[:n] = np.arange(n)
    return ImageBuffer(px.reshape(height, width, 3)), PixelProvenanceMap(width, height, tags, values)


def _grid(vocab_size):
    if vocab_size == 0:
        raise ValueError("cannot encode an empty vocabulary")
    side = math.ceil(math.sqrt(vocab_size))
    tags = np.full(side * side, TAG_PAD, dtype=np.int8)
    tags[:vocab_size] = TAG_API
    values = np.full(side * side, -1, dtype=np.int64)
    values[:vocab_size] = np.arange(vocab_size)
    return side, PixelProvenanceMap(side, side, tags, values)


def encode_api_existence(trace):
    """Square grid over the vocabulary: 255 where the API occurs, else 0."""
    side, prov = _grid(len(trace.vocab))
    px = np.full(side * side, PAD_GRAY, dtype=np.uint8)
    present = np.zeros(len(trace.vocab), dtype=bool)
    present[trace.calls] = True
    px[: present.size] = np.where(present, WHITE, BLACK)
    return ImageBuffer(px.reshape(side, side)), prov


def encode_api_frequency(trace):
    """Square grid over the vocabulary; intensity = round_half_up(255 * count / max)."""
    if len(trace) == 0:
        raise ValueError("cannot encode empty calls")
    side, prov = _grid(len(trace.vocab))
    counts = np.bincount(trace.calls, minlength=len(trace.vocab)).astype(np.int64)
    top = int(counts.max())
    # exact integer form of floor(255 * c / top + 1/2)
    intensity = (510 * counts + top) // (2 * top)
    px = np.full(side * side, PAD_GRAY, dtype=np.uint8)
    px[: counts.size] = intensity
    return ImageBuffer(px.reshape(side, side)), prov


ENCODERS = {
    "api_sequence": encode_api_sequence,
    "api_existence": encode_api_existence,
    "api_frequency": encode_api_frequency,
}


# ---------------------------------------------------------------------------
# netpbm


class ImageFormatError(ValueError):
    pass


def sidecar_path(image_path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + ".prov.json")


def write_image(path, image: ImageBuffer, encoder="", provenance=None):
    """Binary PGM (gray) or PPM (RGB) with one comment line.

    The comment names the encoder and the provenance sidecar; the sidecar is
    written when ``provenance`` is given.
    """
    path = Path(path)
    magic = b"P5" if image.channels == 1 else b"P6"
    side = sidecar_path(path)
    comment = f"encoder={encoder or 'unknown'} provenance={side.name}"
    header = b"%s\n# %s\n%d %d\n255\n" % (magic, comment.encode("utf-8"), image.width, image.height)
    path.write_bytes(header + image.tobytes())
    if provenance is not None:
        if (provenance.width, provenance.height) != (image.width, image.height):
            raise ValueError("provenance does not match image dimensions")
        side.write_text(json.dumps(provenance.to_json(), separators=(",", ":")) + "\n")
    return path


def _header_fields(blob, pos, count):
    """Read ``count`` whitespace-separated header fields, collecting comments."""
    fields, comments = [], []
    n = len(blob)
    while len(fields) < count:
        while pos < n and blob[pos : pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise ImageFormatError("truncated netpbm header")
        if blob[pos : pos + 1] == b"#":
            end = blob.find(b"\n", pos)
            if end < 0:
                raise ImageFormatError("truncated netpbm header")
            comments.append(blob[pos + 1 : end].decode("utf-8", "replace").strip())
            pos = end + 1
            continue
        start = pos
        while pos < n and not blob[pos : pos + 1].isspace() and blob[pos : pos + 1] != b"#":
            pos += 1
        fields.append(blob[start:pos])
    return fields, comments, pos


def parse_netpbm(blob: bytes, channels=None) -> ImageBuffer:
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported netpbm magic {magic!r}; expected P5 or P6")
    found = 3 if magic == b"P6" else 1
    if channels is not None and channels != found:
        kind = "gray" if channels == 1 else "RGB"
        raise TypeError(f"expected a {kind} image but file is {magic.decode()}")
    fields, comments, pos = _header_fields(blob, 2, 3)
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise ImageFormatError(f"bad netpbm header fields {fields!r}") from None
    if maxval != 255:
        raise ImageFormatError(f"maxval must be 255, got {maxval}")
    pos += 1  # single whitespace byte before the raster
    size = width * height * found
    payload = blob[pos : pos + size]
    if len(payload) != size:
        raise ImageFormatError(f"raster has {len(payload)} bytes; expected {size}")
    shape = (height, width) if found == 1 else (height, width, 3)
    return ImageBuffer(np.frombuffer(payload, dtype=np.uint8).reshape(shape), comments[0] if comments else "")


def read_image(path, channels=None) -> ImageBuffer:
    return parse_netpbm(Path(path).read_bytes(), channels)


def read_provenance(path) -> PixelProvenanceMap:
    return PixelProvenanceMap.from_json(json.loads(Path(path).read_text()))
