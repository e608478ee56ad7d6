import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import texp.imaging as imaging
from golden_cases import GOLDEN, cases
from texp.imaging import (
    TAG_API,
    TAG_OFF,
    TAG_PAD,
    ImageBuffer,
    ImageFormatError,
    PixelProvenanceMap,
    api_color,
    encode_api_existence,
    encode_api_frequency,
    encode_api_sequence,
    encode_prediction_bitmap,
    fnv1a32,
    parse_netpbm,
    read_image,
    read_provenance,
    rgb_from_hash,
    sidecar_path,
    write_image,
)
from texp.predictor import PredictionOutcomes
from texp.traces import BENIGN, ApiTrace

C, I = True, False


def _outcomes(bits, offsets=None):
    return PredictionOutcomes.from_correct("t", bits, offsets)


def _api(names, vocab=None):
    return ApiTrace.from_names("t", BENIGN, names, vocab)


# -- prediction bitmap ----------------------------------------------------------


def test_bitmap_four_outcomes():  # [TRIVIAL]
    img, prov = encode_prediction_bitmap(_outcomes([C, C, I, C]), 2)
    assert img.pixels.tolist() == [[255, 255], [0, 255]]
    assert not prov.padding.any()


def test_bitmap_padding():  # [TRIVIAL]
    img, prov = encode_prediction_bitmap(_outcomes([C, I, C, I, C]), 2)
    assert (img.width, img.height) == (2, 3)
    assert img.pixels.ravel()[5] == 128
    assert prov.tag(5) == ("pad", None)


def test_bitmap_all_correct():  # [TRIVIAL]
    img, _ = encode_prediction_bitmap(_outcomes([C] * 16), 4)
    assert (img.pixels == 255).all()


def test_bitmap_fixed_height_and_cap():  # [TRIVIAL]
    img, prov = encode_prediction_bitmap(_outcomes([C] * 5), 2, height=4)
    assert img.height == 4 and prov.padding.sum() == 3
    with pytest.raises(ValueError):
        encode_prediction_bitmap(_outcomes([C] * 5), 2, height=2)
    img, prov = encode_prediction_bitmap(_outcomes([C] * 10), 2, cap=4)
    assert img.height == 2 and not prov.padding.any()


def test_bitmap_provenance_holds_trace_offsets():  # [TRIVIAL]
    _, prov = encode_prediction_bitmap(_outcomes([C, I, C], offsets=[16, 20, 31]), 2)
    assert [prov.tag(i) for i in range(4)] == [("off", 16), ("off", 20), ("off", 31), ("pad", None)]


# -- API sequence -----------------------------------------------------------------


def test_sequence_same_api_same_color():  # [TRIVIAL]
    names = ["A", "B", "C", "X", "D", "E", "F", "G", "H", "X", "K"]
    img, _ = encode_api_sequence(_api(names), 4)
    flat = img.pixels.reshape(-1, 3)
    assert flat[3].tolist() == flat[9].tolist() == list(api_color("X"))


def test_sequence_one_call():  # [TRIVIAL]
    img, prov = encode_api_sequence(_api(["Sleep"]), 4)
    assert (img.width, img.height, img.channels) == (4, 1, 3)
    assert prov.padding.tolist() == [False, True, True, True]
    assert (img.pixels.reshape(-1, 3)[1:] == 0).all()


def test_sequence_color_collision_is_logged(monkeypatch, caplog):  # [TRIVIAL]
    monkeypatch.setattr(imaging, "api_color", lambda name: (10, 20, 30))
    with caplog.at_level(logging.WARNING, logger="texp.imaging"):
        img, _ = encode_api_sequence(_api(["A", "B"]), 2)
    assert "collision" in caplog.text
    assert img.pixels.reshape(-1, 3).tolist() == [[10, 20, 30], [10, 20, 30]]


# -- existence / frequency -----------------------------------------------------------


def test_existence_grid():  # [TRIVIAL]
    vocab = tuple("ABCDEFGHI")
    img, prov = encode_api_existence(_api(list("ACEG"), vocab))
    assert (img.width, img.height) == (3, 3)
    assert (img.pixels == 255).sum() == 4
    assert (prov.tags == TAG_API).all()


def test_existence_all_present():  # [TRIVIAL]
    vocab = tuple("ABCDE")
    img, prov = encode_api_existence(_api(list("EDCBA"), vocab))
    flat = img.pixels.ravel()
    assert (flat[:5] == 255).all() and (flat[5:] == 128).all()


def test_existence_grid_rule():  # [TRIVIAL] ceil(sqrt(10)) = 4
    img, prov = encode_api_existence(_api(["A"], tuple("ABCDEFGHIJ")))
    assert (img.width, img.height) == (4, 4)
    assert prov.padding.sum() == 6


def test_frequency_scaling():  # [DERIVED] 255 * 1 / 4 = 63.75 rounds to 64
    img, _ = encode_api_frequency(_api(["CreateFileW"] * 4 + ["CryptEncrypt"]))
    assert img.pixels.ravel()[:2].tolist() == [255, 64]


def test_frequency_round_half_up():  # [DERIVED] 255 * 1 / 2 = 127.5 rounds up to 128
    img, _ = encode_api_frequency(_api(["A", "A", "B"]))
    assert img.pixels.ravel()[:2].tolist() == [255, 128]


def test_frequency_absent_and_single():  # [TRIVIAL]
    img, _ = encode_api_frequency(_api(["B", "B"], ("A", "B", "C")))
    assert img.pixels.ravel()[:3].tolist() == [0, 255, 0]


@given(st.lists(st.integers(0, 7), min_size=1, max_size=200))
def test_frequency_monotone_and_exact(ids):
    vocab = tuple("ABCDEFGH")
    img, _ = encode_api_frequency(_api([vocab[i] for i in ids], vocab))
    counts = np.bincount(ids, minlength=8)
    px = img.pixels.ravel()[:8].astype(int)
    # oracle: exact rational round-half-up with Python fractions
    from fractions import Fraction
    import math

    expect = [math.floor(Fraction(255 * int(c), int(counts.max())) + Fraction(1, 2)) for c in counts]
    assert px.tolist() == expect
    order = np.argsort(counts, kind="stable")
    assert (np.diff(px[order]) >= 0).all()


# -- provenance invariants ---------------------------------------------------------------


@given(st.lists(st.booleans(), min_size=1, max_size=100), st.integers(1, 17))
def test_bitmap_provenance_invertible(bits, width):
    offsets = np.arange(len(bits)) * 3 + 16
    img, prov = encode_prediction_bitmap(_outcomes(bits, offsets), width)
    n = len(bits)
    assert prov.tags[:n].tolist() == [TAG_OFF] * n
    assert prov.values[:n].tolist() == offsets.tolist()
    assert (prov.tags[n:] == TAG_PAD).all() and (prov.values[n:] == -1).all()
    assert (img.pixels.ravel()[n:] == 128).all()


@given(st.lists(st.sampled_from(["A", "B", "C", "D"]), min_size=1, max_size=100), st.integers(1, 17))
def test_sequence_provenance_invertible(names, width):
    img, prov = encode_api_sequence(_api(names), width)
    n = len(names)
    assert prov.values[:n].tolist() == list(range(n))
    assert (prov.tags[n:] == TAG_PAD).all()
    flat = img.pixels.reshape(-1, 3)
    for i in range(n):
        assert tuple(flat[prov.values[i]]) == api_color(names[i])


@given(st.lists(st.sampled_from(["A", "B", "C", "D", "E"]), min_size=1, max_size=50))
def test_encoders_are_pure(names):
    t = _api(names, tuple("ABCDE"))
    for enc in (encode_api_existence, encode_api_frequency, lambda x: encode_api_sequence(x, 3)):
        a, pa = enc(t)
        b, pb = enc(t)
        assert a.tobytes() == b.tobytes() and pa == pb
        assert not (pa.tags[pa.padding] != TAG_PAD).any()


# -- palette ---------------------------------------------------------------------


def test_fnv1a_reference_vectors():  # [DERIVED] published FNV-1a 32-bit test vectors
    assert fnv1a32(b"") == 0x811C9DC5
    assert fnv1a32(b"a") == 0xE40C292C
    assert fnv1a32(b"foobar") == 0xBF9CF968


def test_black_is_reserved():  # [TRIVIAL]
    assert rgb_from_hash(0x7F000000) == (64, 64, 64)
    assert rgb_from_hash(0x00010203) == (1, 2, 3)


def test_pinned_colors():  # [DERIVED] golden values recorded at first run
    assert api_color("CryptEncrypt") == (131, 68, 132)
    assert api_color("HttpSendRequestW") == (216, 155, 101)


# -- netpbm I/O ----------------------------------------------------------------------


def test_gray_round_trip(tmp_path):  # [TRIVIAL]
    img = ImageBuffer(np.array([[0, 255], [128, 7]], dtype=np.uint8))
    back = read_image(write_image(tmp_path / "x.pgm", img, "test"))
    assert back == img
    assert back.comment == "encoder=test provenance=x.prov.json"


@given(st.integers(1, 6), st.integers(1, 6), st.booleans(), st.randoms())
def test_netpbm_round_trip(w, h, rgb, r):
    shape = (h, w, 3) if rgb else (h, w)
    px = np.array([r.randrange(256) for _ in range(int(np.prod(shape)))], dtype=np.uint8).reshape(shape)
    import pathlib
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        p = write_image(pathlib.Path(d) / "x.img", ImageBuffer(px))
        assert np.array_equal(read_image(p).pixels, px)


def test_p6_read_as_gray_is_a_type_error(tmp_path):  # [TRIVIAL]
    p = write_image(tmp_path / "c.ppm", ImageBuffer(np.zeros((2, 2, 3), dtype=np.uint8)))
    with pytest.raises(TypeError):
        read_image(p, channels=1)


@pytest.mark.parametrize(
    "blob",
    [b"P3\n1 1\n255\n0", b"P5\n2 2\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00", b"P5\n1", b"P5\n# c"],
)
def test_malformed_netpbm(blob):  # [TRIVIAL]
    with pytest.raises(ImageFormatError):
        parse_netpbm(blob)


def test_sidecar_round_trip(tmp_path):  # [TRIVIAL]
    img, prov = encode_prediction_bitmap(_outcomes([C, I, C], [16, 17, 19]), 2)
    p = write_image(tmp_path / "b.pgm", img, "prediction_bitmap", prov)
    assert sidecar_path(p).name == "b.prov.json"
    assert read_provenance(sidecar_path(p)) == prov


def test_provenance_rejects_bad_tags():  # [TRIVIAL]
    with pytest.raises(ValueError):
        PixelProvenanceMap(1, 1, [9], [0])
    with pytest.raises(ValueError):
        PixelProvenanceMap(2, 1, [TAG_OFF], [0])


@pytest.mark.parametrize("name", sorted(cases()))
def test_golden_files(tmp_path, name):  # [DERIVED] pinned bytes
    encoder, image, prov = cases()[name]
    p = write_image(tmp_path / name, image, encoder, prov)
    assert p.read_bytes() == (GOLDEN / name).read_bytes()
    assert sidecar_path(p).read_bytes() == sidecar_path(GOLDEN / name).read_bytes()


def test_golden_bitmap_by_hand():  # [DERIVED] header and raster assembled by hand
    expect = b"P5\n# encoder=prediction_bitmap provenance=bitmap.prov.json\n2 2\n255\n" + bytes([255, 255, 0, 255])
    assert (GOLDEN / "bitmap.pgm").read_bytes() == expect
