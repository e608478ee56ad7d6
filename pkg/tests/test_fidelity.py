import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from texp.explainer import Explanation, segment_grid
from texp.fidelity import (
    ApiSignature,
    CfgSignature,
    FidelityError,
    FidelityReport,
    RegionEntry,
    RegionReport,
    backmap,
    corpus_consistency,
    deletion_curve,
    dispersion,
    extract_signature,
    longest_run,
    region_recovery,
)
from texp.imaging import (
    ImageBuffer,
    PixelProvenanceMap,
    TAG_OFF,
    encode_api_existence,
    encode_api_sequence,
    encode_prediction_bitmap,
)
from texp.predictor import PredictionOutcomes
from texp.synth import GroundTruthRegion
from texp.traces import BENIGN, MALICIOUS, ApiTrace, ControlFlowTrace, Corpus, Kind

ICALL = Kind.ICALL.code


def _expl(coefs, top=None, cls=1, baseline=128):
    c = np.asarray(coefs, float)
    if top is None:
        top = [int(j) for j in np.lexsort((np.arange(c.size), -np.abs(c))) if c[j] != 0][:5]
    return Explanation(cls, 0.0, c, top, {"baseline": baseline}, 1.0)


def _cfg_trace(bbids, label=MALICIOUS, id="m"):
    return ControlFlowTrace(id, label, bbids, [ICALL] * len(bbids))


def _identity_image(n, width):
    """Bitmap whose pixel i maps to trace offset i."""
    img, prov = encode_prediction_bitmap(PredictionOutcomes.from_correct("t", [True] * n), width)
    return img, prov


def brute_longest_run(seq):
    best = cur = 0
    prev = object()
    for x in seq:
        cur = cur + 1 if x == prev else 1
        prev = x
        best = max(best, cur)
    return best


# -- backmap -------------------------------------------------------------------------------


def test_backmap_planted_run():  # [DERIVED] run-length scan oracle
    rng = np.random.default_rng(0)
    bbids = rng.integers(0, 40, 640)
    bbids[128:428] = 42
    trace = _cfg_trace(bbids)
    img, prov = _identity_image(640, 8)
    seg = segment_grid(img, prov, 8)  # 64 offsets per superpixel
    hot = np.zeros(len(seg))
    hot[2:7] = 1.0  # superpixels 2..6 cover offsets 128..447
    rep = backmap(_expl(hot), seg, prov, trace)
    assert rep.dominant == 42
    assert rep.longest_run == brute_longest_run(bbids[128:448]) == 300
    assert rep.entries[0].intervals == ((128, 192),)
    assert extract_signature(rep) == CfgSignature(42, 150)


def test_backmap_empty_explanation():  # [TRIVIAL]
    img, prov = _identity_image(64, 8)
    seg = segment_grid(img, prov, 4)
    rep = backmap(_expl(np.zeros(len(seg)), top=[]), seg, prov, _cfg_trace(np.zeros(64, int)))
    assert len(rep) == 0
    with pytest.raises(FidelityError, match="empty region report"):
        extract_signature(rep)


def test_backmap_existence_markers():  # [PAPER] crypto and HTTP names
    vocab = ("CreateFileW", "CryptEncrypt", "HttpSendRequestW", "ReadFile")
    trace = ApiTrace.from_names("m", MALICIOUS, ["CreateFileW", "CryptEncrypt", "HttpSendRequestW"], vocab)
    img, prov = encode_api_existence(trace)
    seg = segment_grid(img, prov, 1)  # one cell per API
    rep = backmap(_expl([0, 0.8, 0.5, 0]), seg, prov, trace)
    assert rep.api_names == ("CryptEncrypt", "HttpSendRequestW")
    assert extract_signature(rep) == ApiSignature(frozenset({"CryptEncrypt", "HttpSendRequestW"}))


def test_backmap_api_names_only_when_called():  # [TRIVIAL]
    vocab = ("A", "B", "C", "D")
    trace = ApiTrace.from_names("m", MALICIOUS, ["A", "A"], vocab)
    img, prov = encode_api_existence(trace)
    seg = segment_grid(img, prov, 2)
    rep = backmap(_expl([1.0]), seg, prov, trace)
    assert rep.api_names == ("A",)
    # with a bare vocabulary every cell's name is reported
    assert backmap(_expl([1.0]), seg, prov, vocab).api_names == vocab


def test_backmap_sequence_image_names():  # [TRIVIAL]
    trace = ApiTrace.from_names("m", MALICIOUS, ["A", "B", "B", "C"])
    img, prov = encode_api_sequence(trace, 2)
    seg = segment_grid(img, prov, 1)
    rep = backmap(_expl([0, 1.0, 1.0, 0]), seg, prov, trace)
    assert rep.dominant == "B" and rep.longest_run == 2 and rep.api_names == ("B",)


def test_mixed_provenance_rejected():  # [TRIVIAL]
    entries = (RegionEntry(0, 1.0, 4, "off", dominant=3, longest_run=4), RegionEntry(1, 0.5, 4, "api", api_names=("A",)))
    with pytest.raises(FidelityError, match="heterogeneous provenance"):
        extract_signature(RegionReport("t", entries, "mixed"))


def test_signature_from_api_report():  # [TRIVIAL]
    rep = RegionReport("t", (RegionEntry(0, 1.0, 1, "api", api_names=("CryptEncrypt",)),), "api", api_names=("CryptEncrypt",))
    assert extract_signature(rep) == ApiSignature(frozenset({"CryptEncrypt"}))


@given(st.lists(st.integers(0, 3), min_size=8, max_size=80), st.integers(1, 6), st.integers(1, 4))
def test_backmap_offsets_in_bounds(bbids, width, cell):
    trace = _cfg_trace(bbids)
    # outcomes at every second offset
    offs = np.arange(0, len(bbids), 2)
    img, prov = encode_prediction_bitmap(PredictionOutcomes.from_correct("t", [True] * offs.size, offs), width)
    seg = segment_grid(img, prov, cell)
    rep = backmap(_expl(np.linspace(1, 0.1, len(seg))), seg, prov, trace)
    for e in rep.entries:
        for a, b in e.intervals:
            assert 0 <= a < b <= len(bbids)
        # runs count only adjacent offsets, so with stride 2 each run has length 1
        assert e.longest_run == 1


def test_backmap_rejects_foreign_trace():  # [TRIVIAL]
    img, prov = _identity_image(64, 8)
    seg = segment_grid(img, prov, 8)
    with pytest.raises(FidelityError, match="outside trace"):
        backmap(_expl([1.0]), seg, prov, _cfg_trace([1] * 10))


@given(st.lists(st.integers(0, 2), min_size=1, max_size=50))
def test_longest_run_matches_scan(seq):
    assert longest_run(np.arange(len(seq)), np.array(seq)) == brute_longest_run(seq)


# -- recovery ----------------------------------------------------------------------------------


def _grid_case():
    img, prov = _identity_image(16, 4)
    return img, prov, segment_grid(img, prov, 2)  # 4 superpixels of 4 pixels


def test_recovery_exact():  # [TRIVIAL]
    img, prov, seg = _grid_case()
    # superpixels 0 and 1 cover the top two rows, offsets 0..7
    p, r, iou = region_recovery(_expl([1, 1, 0, 0]), seg, prov, GroundTruthRegion("t", 0, 8, ""))
    assert (p, r, iou) == (1.0, 1.0, 1.0)


def test_recovery_disjoint():  # [TRIVIAL]
    img, prov, seg = _grid_case()
    assert region_recovery(_expl([0, 0, 1, 1]), seg, prov, GroundTruthRegion("t", 0, 8, "")) == (0.0, 0.0, 0.0)


def test_recovery_half_overlap():  # [TRIVIAL] |E| = |G| = 8, overlap 4 -> IoU 4 / 12
    img, prov, seg = _grid_case()
    p, r, iou = region_recovery(_expl([0, 1, 0, 1]), seg, prov, GroundTruthRegion("t", 0, 8, ""))
    assert (p, r) == (0.5, 0.5) and iou == pytest.approx(1 / 3)


@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4), st.integers(0, 15), st.integers(1, 16))
def test_recovery_bounds(coefs, start, length):
    img, prov, seg = _grid_case()
    end = min(16, start + length)
    p, r, iou = region_recovery(_expl(coefs), seg, prov, GroundTruthRegion("t", start, end, ""))
    assert 0 <= iou <= min(p, r) <= max(p, r) <= 1


def test_recovery_api_grid():  # [TRIVIAL] planted names mark the ground-truth cells
    vocab = ("A", "B", "M1", "M2")
    trace = ApiTrace.from_names("m", MALICIOUS, ["A", "M1", "M2", "B"], vocab)
    img, prov = encode_api_existence(trace)
    seg = segment_grid(img, prov, 1)
    p, r, iou = region_recovery(_expl([0, 0, 1, 1]), seg, prov, GroundTruthRegion("m", 1, 3, "M1,M2"), trace=trace)
    assert (p, r, iou) == (1.0, 1.0, 1.0)


# -- deletion ----------------------------------------------------------------------------------


class DarkModel:
    def predict_proba(self, images):
        b = np.asarray(images, float).reshape(len(images), -1)
        p = 1 - b.mean(axis=1) / 255
        return np.stack([1 - p, p], axis=1)


def test_deletion_first_point_is_raw_prediction():  # [TRIVIAL]
    img = ImageBuffer(np.array([[0, 0, 255, 255]] * 4, np.uint8))
    seg = segment_grid(img, None, 2)
    model = DarkModel()
    curve = deletion_curve(img, _expl([0.5, 0.1, 0.4, 0.05]), seg, model, steps=3, baseline=255)
    assert curve[0] == (0, model.predict_proba(img.pixels[None])[0, 1])
    assert [j for j, _ in curve] == [0, 1, 2, 3]
    assert all(b <= a for (_, a), (_, b) in zip(curve, curve[1:]))


def test_deletion_constant_model_is_flat():  # [TRIVIAL]
    class Const:
        def predict_proba(self, images):
            return np.full((len(images), 2), 0.5)

    img = ImageBuffer(np.zeros((4, 4), np.uint8))
    curve = deletion_curve(img, _expl([1, 0.5, 0.2, 0.1]), segment_grid(img, None, 2), Const())
    assert {p for _, p in curve} == {0.5}


def test_deletion_uses_support_only():  # [TRIVIAL] negative coefficients are never removed
    img = ImageBuffer(np.zeros((4, 4), np.uint8))
    seg = segment_grid(img, None, 2)
    curve = deletion_curve(img, _expl([-1.0, 0.3, -0.9, -0.8]), seg, DarkModel(), steps=3, baseline=255)
    assert len(curve) == 2
    with pytest.raises(FidelityError):
        deletion_curve(img, _expl([-1.0, -0.3, 0, 0]), seg, DarkModel())


# -- consistency ----------------------------------------------------------------------------------


def _corpus():
    loop = [7] * 10
    return Corpus(
        (
            _cfg_trace([1, 2] + loop + [3], MALICIOUS, "m1"),
            _cfg_trace(loop + [4], MALICIOUS, "m2"),
            _cfg_trace([1, 7, 2, 7, 7], BENIGN, "b1"),
            _cfg_trace([1, 2, 3], BENIGN, "b2"),
        )
    )


def test_consistency_planted():  # [TRIVIAL]
    assert corpus_consistency(CfgSignature(7, 5), _corpus()) == (1.0, 0.0)


def test_consistency_absent():  # [TRIVIAL]
    assert corpus_consistency(CfgSignature(99, 1), _corpus()) == (0.0, 0.0)


def test_consistency_threshold_one():  # [TRIVIAL] any occurrence matches
    assert corpus_consistency(CfgSignature(7, 1), _corpus()) == (1.0, 0.5)


def test_consistency_on_synthetic_corpus(small_cfg, small_params):  # [DERIVED] guaranteed by construction, checked by scan
    corpus, _ = small_cfg
    sig = CfgSignature(small_params.vocab_size - 1, small_params.anomaly_len // 2)
    assert corpus_consistency(sig, corpus) == (1.0, 0.0)


@given(st.lists(st.tuples(st.lists(st.integers(0, 3), min_size=1, max_size=15), st.booleans()), min_size=1, max_size=8),
       st.integers(0, 3), st.integers(1, 4))
def test_consistency_matches_recount(items, bbid, run):
    corpus = Corpus(tuple(_cfg_trace(b, MALICIOUS if m else BENIGN, f"t{i}") for i, (b, m) in enumerate(items)))
    sig = CfgSignature(bbid, run)

    def has(seq):
        return any(all(x == bbid for x in seq[i : i + run]) and i + run <= len(seq) for i in range(len(seq)))

    expect = {}
    for lab in (MALICIOUS, BENIGN):
        group = [b for b, m in items if (MALICIOUS if m else BENIGN) == lab]
        expect[lab] = sum(has(b) for b in group) / len(group) if group else 0.0
    assert corpus_consistency(sig, corpus) == (expect[MALICIOUS], expect[BENIGN])


# -- dispersion -------------------------------------------------------------------------------------


def test_dispersion_cases():  # [TRIVIAL]
    assert dispersion(_expl([0, 0, 3.0, 0])) == 0.25
    assert dispersion(_expl([2.0] * 5)) == 1.0
    assert dispersion(_expl([1.0, -0.2, 0.19, 0])) == 0.5


def test_report_json():  # [TRIVIAL]
    rep = FidelityReport({"precision": 1.0}, [(0, 0.9), (1, 0.2)], {"malicious": 1.0, "benign": 0.0}, 0.1)
    assert rep.to_json()["deletion_curve"] == [[0, 0.9], [1, 0.2]]
