"""Acceptance suite: one test and one PASS/FAIL line per criterion.

Criteria 1, 3 and 5 share one desk-scale run (150 x 1000 RT slice, 10%
training, 200 evaluation queries). Criteria 2, 6 and 7 use a smaller
replication fixture so that five seeds fit in the time budget. Everything
runs on synthetic WS-DREAM-like data.
"""

import time

import numpy as np
import pytest

from fes import bench
from fes.bench import ExperimentConfig
from fes.clustering import build_forest
from fes.dataset import SplitSpec, split
from fes.engine import FesEngine, PipelineConfig, Query, build_artifacts
from fes.imputation import MfParams, cf_fill, mf_fill
from fes.neuralreg import MlpSpec, init_params, loss_and_gradient
from fes.synth import SynthSpec, generate

pytestmark = pytest.mark.slow

# 60 x 200 slice; n_min scaled from 100 at 339 users
REPLICATION = dict(desk_users=60, desk_services=200, n_min=18, s2_samples=300, eval_queries=60)


@pytest.fixture(scope="module")
def desk():
    """Full pipeline on the desk-scale slice with the default hyperparameters."""
    cfg = ExperimentConfig(seeds=(0,), train_fractions=(0.1,))
    t0 = time.perf_counter()
    bundle = bench.load_bundle(cfg)
    train, _, test = split(bundle, SplitSpec(0.1, 0))
    cells = bench.sample_cells(test, cfg.eval_queries, 0)
    art = build_artifacts(train, bundle.user_contexts, bundle.service_contexts, cfg.pipeline(0))
    ev = bench.evaluate(art, cells)
    base = {k: bench.mae(v[cells.users, cells.services], cells.values) for k, v in bench.baselines(train, 0).items()}
    return dict(art=art, ev=ev, base=base, seconds=time.perf_counter() - t0)


@pytest.fixture(scope="module")
def replication_accuracy():
    cfg = ExperimentConfig(train_fractions=(0.1, 0.2), runs=5, **REPLICATION)
    return bench.run_accuracy(cfg)


def mean_mae(rows, **match):
    vals = [r.mae for r in rows if all(r.config.get(k) == v for k, v in match.items())]
    return float(np.mean(vals))


def test_c01_accuracy_dominance(desk, verdict):
    fes, base = desk["ev"].mae(), desk["base"]
    ok = (
        fes <= 0.5 * base["column_mean"]
        and fes <= base["cf"]
        and fes <= base["mf"]
        and desk["seconds"] < 30 * 60
    )
    detail = (
        f"FES {fes:.4f}, column-mean {base['column_mean']:.4f} (x0.5 = {0.5 * base['column_mean']:.4f}), "
        f"CF {base['cf']:.4f}, MF {base['mf']:.4f}, runtime {desk['seconds'] / 60:.1f} min"
    )
    assert verdict(1, "accuracy dominance", ok, detail), detail


def test_c02_density_trend(replication_accuracy, verdict):
    m10 = mean_mae(replication_accuracy, method="fes", train_fraction=0.1)
    m20 = mean_mae(replication_accuracy, method="fes", train_fraction=0.2)
    detail = f"mean FES MAE over 5 seeds: 10% {m10:.4f}, 20% {m20:.4f}"
    assert verdict(2, "density trend", m20 <= m10, detail), detail


def test_c03_fusion_gain(desk, verdict):
    fes, mean4 = desk["ev"].mae(), desk["ev"].mean4_mae()
    detail = f"fused {fes:.4f} vs mean of four stage-1 outputs {mean4:.4f}"
    assert verdict(3, "fusion gain", fes <= mean4, detail), detail


def test_c04_scalability(verdict):
    # WoCC base of the augmentation table; stage-1 inputs capped at 4096 services
    cfg = ExperimentConfig(
        desk_users=142, desk_services=4500, wocc=True, n_min=65, feature_cap=4096, s2_samples=10, seeds=(0,)
    )
    rows = bench.run_scalability(cfg, bench.DEFAULT_FACTORS, n_queries=5)
    pairs = [(r.extra["size_ratio"], r.timing["time_ratio"]) for r in rows]
    ratio9 = next(t for s, t in pairs if s == 9.0)
    detail = "size->time " + ", ".join(f"{s:g}x->{t:.2f}" for s, t in pairs)
    assert verdict(4, "scalability (9x time ratio <= 4.5)", ratio9 <= 4.5, detail), detail


def test_c05_responsiveness(desk, verdict):
    lat = desk["ev"].latency_stats()
    ratio = desk["art"].build_seconds / lat["mean_latency"]
    ok = lat["mean_latency"] <= 5.0 and ratio >= 100
    detail = (
        f"mean {lat['mean_latency']:.3f} s, p95 {lat['p95_latency']:.3f} s per query; "
        f"build {desk['art'].build_seconds:.0f} s, build/predict {ratio:.0f}"
    )
    assert verdict(5, "semi-offline responsiveness", ok, detail), detail


def test_c06_cold_start(verdict):
    cfg = ExperimentConfig(runs=2, **REPLICATION)
    rows = bench.run_cold_start(cfg, 0.25, "users")
    masked = [r for r in rows if r.config["mode"] == "masked"]
    unmasked = [r for r in rows if r.config["mode"] == "unmasked"]
    covered = all(r.extra["n_predicted"] == r.extra["n_cells"] > 0 for r in masked)
    m, u = np.mean([r.mae for r in masked]), np.mean([r.mae for r in unmasked])
    ok = covered and m <= 3 * u
    detail = f"all masked cells predicted: {covered}; MAE masked {m:.4f} vs unmasked {u:.4f} (ratio {m / u:.2f})"
    assert verdict(6, "cold-start viability", ok, detail), detail


def test_c07_tau_sweep(verdict):
    cfg = ExperimentConfig(runs=2, **REPLICATION)
    rows = bench.run_sweep(cfg, "tau", [0.2, 0.5, 0.8])
    m = {t: mean_mae(rows, value=t) for t in (0.2, 0.5, 0.8)}
    ok = m[0.5] <= m[0.2] and m[0.5] <= m[0.8]
    detail = ", ".join(f"tau {t}: {v:.4f}" for t, v in m.items())
    assert verdict(7, "tau sweep shape", ok, detail), detail


def test_c08_numerical_core(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        hidden = tuple(int(h) for h in rng.integers(1, 6, size=rng.integers(1, 3)))
        sizes = (int(rng.integers(1, 5)),) + hidden + (1,)
        params = init_params(sizes, rng) * 3
        X = rng.random((int(rng.integers(1, 6)), sizes[0]))
        y = rng.random(X.shape[0])
        _, g = loss_and_gradient(sizes, params, X, y)
        num = np.empty_like(params)
        for i in range(params.size):
            p = params.copy()
            p[i] += 1e-6
            up, _ = loss_and_gradient(sizes, p, X, y)
            p[i] -= 2e-6
            down, _ = loss_and_gradient(sizes, p, X, y)
            num[i] = (up - down) / 2e-6
        worst = max(worst, np.linalg.norm(g - num) / max(np.linalg.norm(g) + np.linalg.norm(num), 1e-12))

    truth = np.outer(rng.uniform(0.5, 2.0, 20), rng.uniform(0.5, 2.0, 20))
    mask = rng.random(truth.shape) < 0.2
    filled = mf_fill(np.where(mask, 0.0, truth), seed=1)
    mf_rel = float(np.max(np.abs(filled[mask] - truth[mask]) / truth[mask]))

    sparse = generate(SynthSpec(40, 60, seed=5)).matrix * (rng.random((40, 60)) < 0.3)
    out = cf_fill(sparse)
    valid = sparse != 0
    cf_exact = out[valid].tobytes() == sparse[valid].tobytes()

    ok = worst < 1e-4 and mf_rel < 0.05 and cf_exact
    detail = f"max gradient rel. error {worst:.1e}; MF rank-1 max rel. error {mf_rel:.3f}; CF valid entries bit-exact: {cf_exact}"
    assert verdict(8, "numerical core", ok, detail), detail


def coverage_ok(forest, shape):
    hits = np.zeros(shape, dtype=np.int32)
    for k, j in forest.multilevel():
        users, services = forest.members(k, j)
        hits[np.ix_(users, services)] += 1
    return bool(np.all(hits == 1))


def test_c09_structural_invariants(small_bundle, verdict):
    b = small_bundle
    small = all(
        coverage_ok(f, (20, 20))
        for n_min in (1, 3, 8)
        for f in build_forest(b.matrix, b.user_contexts, b.service_contexts, 0.5, n_min)
    )

    full = generate(SynthSpec(339, 5825, seed=0))
    train, _, _ = split(full, SplitSpec(0.1, 0))
    forests = build_forest(train, full.user_contexts, full.service_contexts, 0.5, 100)
    full_ok = all(coverage_ok(f, train.shape) for f in forests)
    rng = np.random.default_rng(0)
    sampled = True
    for u, s in zip(rng.integers(0, 339, 10000), rng.integers(0, 5825, 10000)):
        for f in forests:
            users, services = f.members(*f.lookup(int(u), int(s)))
            sampled &= bool(np.isin(u, users) and np.isin(s, services))

    cfg = PipelineConfig(n_min=5, s2_samples=40, mf=MfParams(epochs=30), spec1=MlpSpec(max_epochs=5))
    eng = FesEngine.train(b.matrix, b.user_contexts, b.service_contexts, cfg)
    before = eng.artifacts.fingerprint()
    for u, s in rng.integers(0, 20, (1000, 2)):
        eng.predict(Query(int(u), int(s)))
    untouched = eng.artifacts.fingerprint() == before

    ok = small and full_ok and sampled and untouched
    detail = (
        f"20x20 exhaustive: {small}; 339x5825 exhaustive: {full_ok}, 10000 sampled lookups: {sampled}; "
        f"artifacts unchanged after 1000 predictions: {untouched}"
    )
    assert verdict(9, "structural invariants", ok, detail), detail


def test_c10_determinism(tmp_path, verdict):
    cfg = ExperimentConfig(
        desk_users=30, desk_services=60, n_min=10, s2_samples=60, s1_epochs=20, s2_epochs=300,
        eval_queries=20, seeds=(0, 1), train_fractions=(0.1, 0.2),
    )
    same = []
    for name, run in (
        ("accuracy", lambda: bench.run_accuracy(cfg)),
        ("drift", lambda: bench.run_drift(cfg, [0.1, 0.2, 0.3])),
        ("cold_start", lambda: bench.run_cold_start(cfg)),
    ):
        a, _ = bench.write_rows(run(), tmp_path / f"{name}_a.csv", cfg)
        b, _ = bench.write_rows(run(), tmp_path / f"{name}_b.csv", cfg)
        same.append(a.read_bytes() == b.read_bytes())

    bundle = bench.load_bundle(cfg)
    train, _, _ = split(bundle, SplitSpec(0.1, 3))
    prints = [
        build_artifacts(train, bundle.user_contexts, bundle.service_contexts, cfg.pipeline(3)).fingerprint()
        for _ in range(2)
    ]
    ok = all(same) and prints[0] == prints[1]
    detail = f"identical CSVs (accuracy, drift, cold start): {same}; identical artifacts: {prints[0] == prints[1]}"
    assert verdict(10, "determinism", ok, detail), detail
