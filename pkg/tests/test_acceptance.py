"""The ten acceptance criteria, each at its stated tolerance.

Every check records one ``PASS``/``FAIL`` line that is echoed at the end of
the pytest session.  ``python tests/test_acceptance.py`` runs only this file.
"""

import csv
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from genint import ndcore as nd
from genint._validation import one_hot
from genint.causal import compare_strategies, linear_iv_estimate, StrategyBoundInput
from genint.classify import InterventionalClassifier, IRMClassifier, init_mlp, mlp_forward
from genint.cli import verify_scm
from genint.datagen import ScmLinear, sample_linear_scm
from genint.formats import load_idx, read_tensor_file, write_idx_images, write_idx_labels, write_tensor_file
from genint.genmodel import CVAE
from genint.intervene import LatentPCA
from genint.pipeline import ablation_sweep, read_results_csv

pytestmark = pytest.mark.slow

BUDGET_SECONDS = 30 * 60


def record(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


@pytest.fixture(scope="module")
def causal_top1(full_runs):
    rows = read_results_csv(full_runs[0][0].out / "results.csv")
    return {(r["method"], r["split"]): r["top1"] for r in rows}


def test_criterion_1_table_reproduction(full_runs, causal_top1):
    acc = causal_top1
    erm_conf, erm_causal = acc["erm", "confounded"], acc["erm", "causal"]
    obs, intv = acc["cvae_observational", "causal"], acc["genint", "causal"]
    runtime = full_runs[1][0]
    checks = [
        erm_conf >= 0.97,
        erm_causal <= 0.10 + 0.03,
        0.07 <= obs <= 0.17,
        intv >= 0.24,
        intv >= obs + 0.10,
        runtime < BUDGET_SECONDS,
    ]
    record(
        1,
        all(checks),
        f"ERM confounded {erm_conf:.4f} causal {erm_causal:.4f}; observational CVAE {obs:.4f}; "
        f"interventional CVAE {intv:.4f}; full run {runtime:.0f}s",
    )


def test_criterion_2_method_ordering(causal_top1):
    intv, irm, erm = (causal_top1[m, "causal"] for m in ("genint", "irm", "erm"))
    passed = intv - irm >= 0.03 and irm - erm >= 0.03
    record(2, passed, f"causal test: interventional {intv:.4f}, IRM {irm:.4f}, ERM {erm:.4f} (each gap >= 0.03)")


def _ranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=int)
    ranks[order] = np.arange(len(values))
    return ranks


def test_criterion_3_strategy_trend(full_runs):
    config = full_runs[0][0]
    rows = {r["strategy"]: r for r in ablation_sweep(config)}
    names = ["observational", "weak", "strong"]
    logp = [rows[n]["mean_log_px_given_z"] for n in names]
    acc = [rows[n]["causal_top1"] for n in names]
    increasing = all(a < b for a, b in zip(logp, logp[1:]))
    # rank agreement, with pairs whose accuracies differ by at most a point counted as ties
    agree = all(
        (logp[i] < logp[j]) == (acc[i] < acc[j]) or abs(acc[i] - acc[j]) <= 0.01
        for i in range(3)
        for j in range(i + 1, 3)
    )
    detail = ", ".join(f"{n} logP {l:.6f} acc {a:.4f}" for n, l, a in zip(names, logp, acc))
    record(3, increasing and agree, detail)


def test_criterion_4_correlation_probe(full_runs):
    with open(full_runs[0][0].out / "corr" / "probe.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    annotated = {(r["data"], int(r["subset_size"])): float(r["ratio"]) for r in rows if r["nuisance"] == "annotation"}
    sizes = {int(r["subset_size"]) for r in rows}
    confounded, genint = annotated["confounded", 10], annotated["genint", 10]
    passed = confounded >= 5 and genint <= 1.5 and sizes == {2, 5, 10}
    record(4, passed, f"ratio at 10 classes: confounded {confounded:.2f}x, GenInt {genint:.2f}x; sizes {sorted(sizes)}")


@pytest.mark.xfail(strict=True, reason="the L1 regressor's z-hat still encodes the source image's background color")
def test_regressed_nuisance_carries_no_class_information(full_runs):
    with open(full_runs[0][0].out / "corr" / "probe.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    row = next(r for r in rows if (r["data"], r["nuisance"], r["subset_size"]) == ("genint", "regressed", "10"))
    assert abs(float(row["accuracy"]) - 0.10) <= 0.03


def test_criterion_5_nested_intervals():
    rng = np.random.default_rng(5)
    strict = width = 0
    n = 1000
    for _ in range(n):
        p_y_x = Fraction(int(rng.integers(0, 1001)), 1000)
        lo, hi = sorted(int(v) for v in rng.choice(np.arange(1, 1001), size=2, replace=False))
        a = StrategyBoundInput(p_y_x * Fraction(hi, 1000), Fraction(hi, 1000))
        b = StrategyBoundInput(p_y_x * Fraction(lo, 1000), Fraction(lo, 1000))
        result = compare_strategies(a, b, p_y_x, tol=0)
        strict += result.verdict == "a_tighter" and result.interval_a.is_subset_of(result.interval_b, strict=True)
        width += result.interval_a.width == 1 - a.p_x_given_z and result.interval_b.width == 1 - b.p_x_given_z
    record(5, strict == n and width == n, f"strict subset {strict}/{n}, exact width {width}/{n}")


def test_criterion_6_bound_soundness():
    report = verify_scm(n_scm=1000, iv_samples=1000, seed=6)
    passed = report.natural_violations == 0 and report.intervened_violations == 0
    record(
        6,
        passed,
        f"{report.n_scm} SCMs: natural-bound violations {report.natural_violations}, "
        f"intervened-bound violations {report.intervened_violations}",
    )


def test_criterion_7_linear_iv():
    start = time.perf_counter()
    b_hat = linear_iv_estimate(sample_linear_scm(ScmLinear(b=0.5), 1_000_000, seed=7))
    seconds = time.perf_counter() - start
    record(7, abs(b_hat - 0.5) < 0.02 and seconds < 10, f"b_hat {b_hat:.5f} (true 0.5) in {seconds:.2f}s")


def _gradcheck_case(i):
    """One random double-precision network/loss configuration."""
    rng = np.random.default_rng(1000 + i)
    kind = ("cross_entropy", "elbo", "three_term", "irm")[i % 4]
    d, h, c, n = (int(rng.integers(lo, hi)) for lo, hi in ((2, 8), (2, 10), (2, 5), (2, 6)))
    if kind == "elbo":
        model = CVAE(latent_dim=int(rng.integers(1, 4)), hidden_units=h, n_classes=c)
        params = {k: v.astype(np.float64) for k, v in model._init_params(d, rng).items()}
        x, y = rng.uniform(size=(n, d)), one_hot(rng.integers(0, c, n), c, dtype=np.float64)
        noise = rng.normal(size=(n, model.latent_dim))
        return kind, lambda p: model.negative_elbo(p, x, y, noise), params
    params = {k: v.astype(np.float64) + rng.normal(scale=0.1, size=v.shape) for k, v in init_mlp(rng, [d, h, c]).items()}
    if kind == "cross_entropy":
        x, y = rng.normal(size=(n, d)), rng.integers(0, c, n)
        return kind, lambda p: nd.softmax_cross_entropy(mlp_forward(p, x, 2)[0], y), params
    if kind == "three_term":
        clf = InterventionalClassifier(hidden_units=h, n_classes=c)
        terms = [(w, rng.normal(size=(n, d)), rng.integers(0, c, n)) for w in (1.0, *rng.uniform(0, 2, 2))]
        return kind, lambda p: clf.objective(p, terms), params
    clf = IRMClassifier(hidden_units=h, n_classes=c)
    envs = [(rng.normal(size=(n, d)), rng.integers(0, c, n)) for _ in range(2)]
    weight = float(rng.uniform(0, 10))
    return kind, lambda p: clf.irm_objective(p, envs, weight), params


def test_criterion_8_gradient_checks():
    worst, failures, kinds = 0.0, 0, set()
    for i in range(100):
        kind, loss, params = _gradcheck_case(i)
        report = nd.finite_difference_check(loss, params, step=1e-5, tolerance=1e-4)
        worst = max(worst, report.max_rel_error)
        failures += not report.passed
        kinds.add(kind)
    record(8, failures == 0, f"100 configurations ({', '.join(sorted(kinds))}): max relative error {worst:.2e}")


def test_criterion_9_pca():
    rng = np.random.default_rng(9)
    dim = 8
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    cov = q @ np.diag([4.0, 1.0, 0.8, 0.5, 0.3, 0.2, 0.1, 0.05]) @ q.T
    oracle = np.sqrt(np.sort(np.linalg.eigvalsh(cov))[::-1])
    basis = LatentPCA().fit(rng.multivariate_normal(np.zeros(dim), cov, size=100_000)).basis_
    ortho = basis.orthonormality_error()
    rel = float(np.max(np.abs(basis.sigmas / oracle - 1)))
    record(9, ortho < 1e-5 and rel < 0.02, f"orthonormality error {ortho:.1e}; worst sigma deviation {100 * rel:.2f}%")


def test_criterion_10_formats_and_determinism(full_runs, tmp_path):
    fixture = tmp_path / "images.idx"
    fixture.write_bytes(bytes.fromhex("00000803 00000001 00000002 00000002") + bytes([0, 255, 128, 64]))
    images = load_idx(fixture)
    expected = np.array([0, 255, 128, 64], dtype=np.float32) / np.float32(255)
    idx_ok = images.shape == (1, 2, 2, 1) and np.array_equal(images.ravel(), expected)
    write_idx_images(tmp_path / "again.idx", images)
    idx_ok &= (tmp_path / "again.idx").read_bytes() == fixture.read_bytes()
    labels = tmp_path / "labels.idx"
    labels.write_bytes(bytes.fromhex("00000801 00000003") + bytes([7, 0, 9]))
    idx_ok &= load_idx(labels).tolist() == [7, 0, 9]
    write_idx_labels(tmp_path / "labels_again.idx", load_idx(labels))
    idx_ok &= (tmp_path / "labels_again.idx").read_bytes() == labels.read_bytes()
    tensors = [np.random.default_rng(10).normal(size=(3, 4, 5)).astype(np.float32), np.float32(2.5)]
    gint_ok = True
    for j, t in enumerate(tensors):
        write_tensor_file(tmp_path / f"{j}.gint", t)
        back = read_tensor_file(tmp_path / f"{j}.gint")
        gint_ok &= back.shape == np.shape(t) and back.tobytes() == np.asarray(t).tobytes()
    (first, second), _ = full_runs
    same = (first.out / "results.csv").read_bytes() == (second.out / "results.csv").read_bytes()
    record(10, idx_ok and gint_ok and same, f"IDX round trip {idx_ok}, GINT round trip {gint_ok}, results.csv identical {same}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
