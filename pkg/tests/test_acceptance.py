"""The ten acceptance criteria, each at its stated tolerance.

Runs the default pipelines end to end (about two minutes). Every criterion
prints one ``[PASS]``/``[FAIL]`` line; run directly with
``python tests/test_acceptance.py`` or via pytest.
"""

import json
import sys
import time

import numpy as np
import pytest

from texp.classifier import init_mlp, mlp_loss_and_grads
from texp.cli import main
from texp.explainer import fit_surrogate
from texp.imaging import sidecar_path, write_image
from texp.predictor import gru_loss_and_grads, init_gru

import golden_cases


@pytest.fixture
def report(capsys):
    def _report(n, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} ({detail})")
        assert ok, f"criterion {n} failed: {detail}"

    return _report


def _run(out, *sets):
    argv = ["run", "--out", str(out)]
    for s in sets:
        argv += ["--set", s]
    t0 = time.perf_counter()
    code = main(argv)
    elapsed = time.perf_counter() - t0
    assert code == 0
    return json.loads((out / "summary.json").read_text()), elapsed


@pytest.fixture(scope="module")
def cfg(tmp_path_factory):
    out = tmp_path_factory.mktemp("acc-cfg")
    summary, elapsed = _run(out)
    return out, summary, elapsed


@pytest.fixture(scope="module")
def api(tmp_path_factory):
    out = tmp_path_factory.mktemp("acc-api")
    summary, elapsed = _run(out, "kind=api")
    return out, summary, elapsed


def _rows(out, encoder):
    return json.loads((out / "validation" / f"{encoder}.json").read_text())


def test_criterion_1_cfg_accuracy_and_runtime(cfg, report):
    _, summary, elapsed = cfg
    acc = summary["train_clf"]["encoders"]["prediction_bitmap"]["test_accuracy"]
    n = summary["synth"]["n_traces"]
    report(1, "cfg pipeline accuracy >= 0.99 in < 10 min", n == 400 and acc >= 0.99 and elapsed < 600,
           f"{n} traces, test accuracy {acc:.4f}, runtime {elapsed:.1f} s")


def test_criterion_2_api_accuracy(api, report):
    _, summary, _ = api
    acc = {e: v["test_accuracy"] for e, v in summary["train_clf"]["encoders"].items()}
    ok = acc["api_existence"] >= 0.95 and acc["api_frequency"] >= 0.95 and acc["api_sequence"] >= 0.90
    report(2, "API existence/frequency >= 0.95, sequence >= 0.90", ok,
           ", ".join(f"{e} {a:.4f}" for e, a in sorted(acc.items())))


def test_criterion_3_region_recovery(cfg, report):
    out, _, _ = cfg
    rows = _rows(out, "prediction_bitmap")
    prec = float(np.median([r["precision"] for r in rows]))
    iou = float(np.median([r["iou"] for r in rows]))
    report(3, "median top-5 precision >= 0.8 and IoU >= 0.5 over >= 30 samples",
           len(rows) >= 30 and prec >= 0.8 and iou >= 0.5, f"n={len(rows)}, precision {prec:.4f}, IoU {iou:.4f}")


def test_criterion_4_deletion(cfg, report):
    out, _, _ = cfg
    curves = [json.loads(p.read_text())["deletion_curve"] for p in sorted((out / "validation/prediction_bitmap").glob("*.json"))]
    # probability after removing the top-3 support superpixels
    drops = [c[0][1] - c[min(3, len(c) - 1)][1] for c in curves]
    full = sum(len(c) == 4 for c in curves)
    med = float(np.median(drops))
    report(4, "top-3 support deletion drops p(malicious) by >= 0.2", med >= 0.2,
           f"median drop {med:.4f} over {len(drops)} samples ({full} with three support regions)")


def test_criterion_5_dispersion(api, report):
    out, _, _ = api
    seq = float(np.median([r["dispersion"] for r in _rows(out, "api_sequence")]))
    ex = float(np.median([r["dispersion"] for r in _rows(out, "api_existence")]))
    report(5, "median dispersion sequence > existence", seq > ex, f"sequence {seq:.4f}, existence {ex:.4f}")


def test_criterion_6_corpus_consistency(cfg, report):
    out, _, _ = cfg
    rows = _rows(out, "prediction_bitmap")
    bad = [r["id"] for r in rows if (r["malicious"], r["benign"]) != (1.0, 0.0)]
    bbids = sorted({r["signature"].get("bbid") for r in rows}, key=str)
    runs = [r["signature"].get("min_run", 0) for r in rows]
    report(6, "every extracted signature hits 100% malicious / 0% benign", not bad and len(rows) > 0,
           f"{len(rows) - len(bad)}/{len(rows)} samples; bbid {bbids}, min_run {min(runs)}..{max(runs)}")


def _oracle(M, w, y, lam):
    n, K = M.shape
    Z = np.hstack([np.ones((n, 1)), M])
    W = np.diag(w)
    P = np.diag([0.0] + [lam] * K)
    return np.linalg.inv(Z.T @ W @ Z + P) @ (Z.T @ W @ y)


def test_criterion_7_surrogate_oracle(report):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        K = int(rng.integers(1, 5))
        n = int(rng.integers(K + 2, 13))
        M = rng.integers(0, 2, (n, K)).astype(float)
        w = rng.uniform(0.01, 1.0, n)
        y = rng.uniform(0, 1, n)
        lam = float(rng.uniform(0.1, 2.0))
        b0, coef, _ = fit_surrogate(M, w, y, lam)
        worst = max(worst, np.abs(np.concatenate([[b0], coef]) - _oracle(M, w, y, lam)).max())
    report(7, "fit_surrogate matches the dense normal-equation oracle within 1e-8", worst < 1e-8,
           f"100 instances, max abs error {worst:.2e}")


def _fd_worst(loss_grad, p, *args, eps=1e-6):
    _, g = loss_grad(p, *args)
    worst = 0.0
    for k, v in p.items():
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + eps
            lp, _ = loss_grad(p, *args)
            v[idx] = old - eps
            lm, _ = loss_grad(p, *args)
            v[idx] = old
            num = (lp - lm) / (2 * eps)
            worst = max(worst, abs(num - g[k][idx]) / max(abs(num), abs(g[k][idx]), 1e-8))
    return worst


def test_criterion_8_gradient_checks(report):
    rng = np.random.default_rng(8)
    p = init_mlp(16, 6, seed=1)
    p = {k: v + rng.normal(0, 0.1, v.shape) for k, v in p.items()}
    X = rng.random((5, 16)) - 0.5
    y = rng.integers(0, 2, 5)
    mlp = _fd_worst(mlp_loss_and_grads, p, X, y)
    q = init_gru(4, 3, embed=3, hidden=4, seed=2)
    q = {k: v + rng.normal(0, 0.3, v.shape) for k, v in q.items()}
    gru = _fd_worst(gru_loss_and_grads, q, rng.integers(0, 4, (4, 5)), rng.integers(0, 3, 4))
    report(8, "analytic vs central-difference gradients, max rel error < 1e-4", mlp < 1e-4 and gru < 1e-4,
           f"classifier {mlp:.2e}, recurrent {gru:.2e}")


def test_criterion_9_determinism(cfg, api, tmp_path, report):
    checked, diffs = 0, []
    for (out, _, _), sets in ((cfg, ()), (api, ("kind=api",))):
        again = tmp_path / out.name
        _run(again, *sets)
        for p in sorted(out.rglob("*")):
            rel = p.relative_to(out)
            if not p.is_file() or rel.as_posix() == "run.json":
                continue
            checked += 1
            if p.read_bytes() != (again / rel).read_bytes():
                diffs.append(rel.as_posix())
    report(9, "two identical runs give byte-identical outputs", not diffs,
           f"{checked} files compared (run.json excluded), {len(diffs)} differ {diffs[:3]}")


def test_criterion_10_golden_files(tmp_path, report):
    bad = []
    for name, (encoder, image, prov) in golden_cases.cases().items():
        p = write_image(tmp_path / name, image, encoder, prov)
        if p.read_bytes() != (golden_cases.GOLDEN / name).read_bytes():
            bad.append(name)
        if sidecar_path(p).read_bytes() != sidecar_path(golden_cases.GOLDEN / name).read_bytes():
            bad.append(sidecar_path(p).name)
    report(10, "all four encoders reproduce pinned PGM/PPM bytes", not bad,
           f"{len(golden_cases.cases())} encoders, mismatches: {bad or 'none'}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
