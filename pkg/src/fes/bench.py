"""Experiment harness: accuracy, responsiveness, scalability, cold start,
parameter sweeps and drift, plus three simple baselines.

Every experiment returns :class:`MetricRow` objects. Rows hold only
deterministic quantities; wall-clock measurements go to a separate timing
table so that identical configurations produce identical result files.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import Cells, DatasetBundle, SplitSpec, augment, density, load_wsdream, mask_cold_start, split
from .engine import Artifacts, PipelineConfig, Query, build_artifacts, predict_with, refill
from .errors import ConfigError, DataError
from .imputation import MfParams, cf_fill, mf_fill
from .neuralreg import STAGE1, STAGE2
from .synth import SynthSpec, generate

log = logging.getLogger(__name__)

EXPERIMENTS = ("accuracy", "responsiveness", "scalability", "cold_start", "sweep", "drift")
SWEEP_PARAMETERS = ("tau", "s2_samples", "s2_epochs", "s1_epochs")
DRIFT_MECHANISM = "frozen forests and stage-2 model; stage-1 fills rebuilt from the denser log"


def mae(predicted, actual) -> float:
    p = np.asarray(predicted, dtype=np.float64).ravel()
    a = np.asarray(actual, dtype=np.float64).ravel()
    if p.shape != a.shape:
        raise DataError(f"length mismatch: {p.size} predictions vs {a.size} actual values")
    if p.size == 0:
        raise DataError("mae of an empty set")
    return float(np.mean(np.abs(p - a)))


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings shared by all experiments.

    Without ``dataset`` a synthetic WS-DREAM-like matrix is generated. Unless
    ``full_scale`` is set, larger inputs are cut to a seeded
    ``desk_users x desk_services`` slice.
    """

    dataset: Optional[str] = None
    qos: str = "rt"
    train_fractions: Tuple[float, ...] = (0.1,)
    tau: float = 0.5
    n_min: int = 100
    seeds: Tuple[int, ...] = ()
    runs: int = 5
    wocc: bool = False
    feature_cap: Optional[int] = None
    out: Optional[str] = None
    full_scale: bool = False
    desk_users: int = 150
    desk_services: int = 1000
    data_seed: int = 0
    s2_samples: int = 1800
    s1_epochs: int = 50
    s2_epochs: int = 5000
    eval_queries: int = 200
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "train_fractions", tuple(float(f) for f in self.train_fractions))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            if self.runs < 1:
                raise ConfigError("runs must be >= 1")
            object.__setattr__(self, "seeds", tuple(range(self.runs)))
        object.__setattr__(self, "runs", len(self.seeds))
        for f in self.train_fractions:
            if not 0.0 < f < 1.0:
                raise ConfigError(f"train fraction must lie in (0, 1), got {f}")
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError(f"tau must lie in [0, 1), got {self.tau}")
        if self.n_min < 1:
            raise ConfigError("n_min must be >= 1")
        if self.eval_queries < 1:
            raise ConfigError("eval_queries must be >= 1")

    def pipeline(self, seed: int) -> PipelineConfig:
        return PipelineConfig(
            tau=self.tau,
            n_min=self.n_min,
            wocc=self.wocc,
            mf=MfParams(seed=seed),
            s2_samples=self.s2_samples,
            spec1=replace(STAGE1, max_epochs=self.s1_epochs, seed=seed),
            spec2=replace(STAGE2, max_epochs=self.s2_epochs, seed=seed),
            feature_cap=self.feature_cap,
            seed=seed,
        )

    def echo(self) -> dict:
        d = asdict(self)
        d.pop("out")
        d.pop("workers")
        return d


@dataclass(frozen=True)
class MetricRow:
    experiment: str
    config: Dict[str, object]
    mae: float
    extra: Dict[str, object] = field(default_factory=dict)
    timing: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (self.mae >= 0 or math.isnan(self.mae)):
            raise DataError(f"negative MAE {self.mae}")

    @property
    def mean_latency(self) -> float:
        return self.timing.get("mean_latency", float("nan"))


# ---------------------------------------------------------------------------
# Data and pipeline plumbing


def load_bundle(cfg: ExperimentConfig) -> DatasetBundle:
    if cfg.dataset is None:
        bundle = generate(SynthSpec(cfg.desk_users, cfg.desk_services, seed=cfg.data_seed, qos_kind=cfg.qos))
    else:
        bundle = load_wsdream(cfg.dataset, cfg.qos)
    if not cfg.full_scale and (bundle.n_users > cfg.desk_users or bundle.n_services > cfg.desk_services):
        rng = np.random.default_rng(cfg.data_seed)
        users = np.sort(rng.choice(bundle.n_users, min(cfg.desk_users, bundle.n_users), replace=False))
        services = np.sort(rng.choice(bundle.n_services, min(cfg.desk_services, bundle.n_services), replace=False))
        bundle = bundle.subset(users, services)
    if cfg.wocc:
        bundle = DatasetBundle(bundle.matrix, None, None, bundle.qos_kind)
    return bundle


def sample_cells(cells: Cells, n: int, seed: int) -> Cells:
    """Seeded subset of at most ``n`` cells, in ascending cell order."""
    if len(cells) <= n:
        return cells
    idx = np.sort(np.random.default_rng([seed, 7]).choice(len(cells), n, replace=False))
    return cells.take(idx)


def column_mean_predictor(train: np.ndarray) -> np.ndarray:
    valid = train > 0
    counts = valid.sum(axis=0)
    glob = train[valid].mean()
    col = np.where(counts > 0, train.sum(axis=0) / np.maximum(counts, 1), glob)
    return np.broadcast_to(col, train.shape)


def baselines(train: np.ndarray, seed: int) -> Dict[str, np.ndarray]:
    return {
        "column_mean": column_mean_predictor(train),
        "cf": cf_fill(train),
        "mf": mf_fill(train, seed=seed),
    }


@dataclass
class Evaluation:
    cells: Cells
    predicted: np.ndarray
    stage1: np.ndarray
    latencies: np.ndarray

    def mae(self) -> float:
        return mae(self.predicted, self.cells.values)

    def mean4_mae(self) -> float:
        return mae(self.stage1.mean(axis=1), self.cells.values)

    def latency_stats(self) -> Dict[str, float]:
        return {
            "mean_latency": float(self.latencies.mean()),
            "p95_latency": float(np.percentile(self.latencies, 95)),
        }


def evaluate(art: Artifacts, cells: Cells) -> Evaluation:
    results = [predict_with(art, Query(int(u), int(s))) for u, s in zip(cells.users, cells.services)]
    return Evaluation(
        cells,
        np.array([r.value for r in results]),
        np.array([r.stage1_outputs for r in results]).reshape(-1, 4),
        np.array([r.latency for r in results]),
    )


def _map(fn, items, workers):
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# ---------------------------------------------------------------------------
# Experiments


def _accuracy_cell(bundle: DatasetBundle, cfg: ExperimentConfig, fraction: float, seed: int):
    train, _, test = split(bundle, SplitSpec(fraction, seed))
    cells = sample_cells(test, cfg.eval_queries, seed)
    art = build_artifacts(train, bundle.user_contexts, bundle.service_contexts, cfg.pipeline(seed))
    ev = evaluate(art, cells)
    base = baselines(train, seed)
    echo = {"train_fraction": fraction, "seed": seed}
    timing = dict(ev.latency_stats(), build_seconds=art.build_seconds)
    rows = [
        MetricRow("accuracy", dict(echo, method="fes"), ev.mae(), {"n_test": len(cells)}, timing),
        MetricRow("accuracy", dict(echo, method="stage1_mean"), ev.mean4_mae(), {"n_test": len(cells)}),
    ]
    for name, pred in base.items():
        rows.append(
            MetricRow("accuracy", dict(echo, method=name), mae(pred[cells.users, cells.services], cells.values), {"n_test": len(cells)})
        )
    return rows


def run_accuracy(cfg: ExperimentConfig, bundle: Optional[DatasetBundle] = None) -> List[MetricRow]:
    """FES and baseline MAE for every (train fraction, seed) on the same test cells."""
    bundle = load_bundle(cfg) if bundle is None else bundle
    jobs = [(f, s) for f in cfg.train_fractions for s in cfg.seeds]
    parts = _map(lambda fs: _accuracy_cell(bundle, cfg, *fs), jobs, cfg.workers)
    return [r for p in parts for r in p]


def run_responsiveness(cfg: ExperimentConfig, bundle: Optional[DatasetBundle] = None, n_queries: int = 100) -> List[MetricRow]:
    """Per-query latency over at least ``n_queries`` test queries, with the offline build time for contrast."""
    bundle = load_bundle(cfg) if bundle is None else bundle
    n_queries = max(100, n_queries)
    rows = []
    for seed in cfg.seeds:
        fraction = cfg.train_fractions[0]
        train, _, test = split(bundle, SplitSpec(fraction, seed))
        cells = sample_cells(test, n_queries, seed)
        art = build_artifacts(train, bundle.user_contexts, bundle.service_contexts, cfg.pipeline(seed))
        ev = evaluate(art, cells)
        t = ev.latency_stats()
        t["build_seconds"] = art.build_seconds
        t["build_over_predict"] = art.build_seconds / t["mean_latency"]
        rows.append(MetricRow("responsiveness", {"train_fraction": fraction, "seed": seed}, ev.mae(), {"n_queries": len(cells)}, t))
    return rows


DEFAULT_FACTORS = ((1, 1), (2, 1), (1, 2), (2, 2), (3, 3))


def run_scalability(
    cfg: ExperimentConfig,
    factors: Sequence[Tuple[int, int]] = DEFAULT_FACTORS,
    bundle: Optional[DatasetBundle] = None,
    n_queries: int = 10,
) -> List[MetricRow]:
    """Per-query latency on augmented datasets, relative to the first factor pair."""
    bundle = load_bundle(cfg) if bundle is None else bundle
    seed = cfg.seeds[0]
    fraction = cfg.train_fractions[0]
    rows = []
    base_size = base_time = None
    for uf, sf in factors:
        big = augment(bundle, uf, sf, seed)
        train, _, test = split(big, SplitSpec(fraction, seed))
        cells = sample_cells(test, n_queries, seed)
        art = build_artifacts(train, big.user_contexts, big.service_contexts, cfg.pipeline(seed))
        ev = evaluate(art, cells)
        size = big.matrix.size
        t = ev.latency_stats()
        if base_size is None:
            base_size, base_time = size, t["mean_latency"]
        t["time_ratio"] = t["mean_latency"] / base_time
        t["build_seconds"] = art.build_seconds
        rows.append(
            MetricRow(
                "scalability",
                {"user_factor": uf, "service_factor": sf, "seed": seed},
                ev.mae(),
                {"n_users": big.n_users, "n_services": big.n_services, "size_ratio": size / base_size},
                t,
            )
        )
    return rows


def run_cold_start(
    cfg: ExperimentConfig, fraction: float = 0.25, axis: str = "users", bundle: Optional[DatasetBundle] = None
) -> List[MetricRow]:
    """MAE on the test cells of masked entities, with and without the mask."""
    bundle = load_bundle(cfg) if bundle is None else bundle
    rows = []
    for seed in cfg.seeds:
        tf = cfg.train_fractions[0]
        train, _, test = split(bundle, SplitSpec(tf, seed))
        masked, ids = mask_cold_start(train, axis, fraction, seed)
        sel = np.isin(test.users if axis == "users" else test.services, ids)
        cells = sample_cells(test.take(np.flatnonzero(sel)), cfg.eval_queries, seed)
        echo = {"train_fraction": tf, "seed": seed, "axis": axis, "mask_fraction": fraction}
        for mode, matrix in (("unmasked", train), ("masked", masked)):
            art = build_artifacts(matrix, bundle.user_contexts, bundle.service_contexts, cfg.pipeline(seed))
            ev = evaluate(art, cells)
            covered = int(np.count_nonzero(np.isfinite(ev.predicted)))
            rows.append(
                MetricRow(
                    "cold_start",
                    dict(echo, mode=mode),
                    ev.mae(),
                    {"n_masked": len(ids), "n_cells": len(cells), "n_predicted": covered},
                    ev.latency_stats(),
                )
            )
    return rows


def run_sweep(
    cfg: ExperimentConfig, parameter: str, values: Sequence, bundle: Optional[DatasetBundle] = None
) -> List[MetricRow]:
    """One pipeline per parameter value and seed."""
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"unknown sweep parameter {parameter!r}; choose from {SWEEP_PARAMETERS}")
    bundle = load_bundle(cfg) if bundle is None else bundle
    rows = []
    for value in values:
        sub = replace(cfg, **{parameter: value})
        for seed in cfg.seeds:
            tf = cfg.train_fractions[0]
            train, _, test = split(bundle, SplitSpec(tf, seed))
            cells = sample_cells(test, cfg.eval_queries, seed)
            art = build_artifacts(train, bundle.user_contexts, bundle.service_contexts, sub.pipeline(seed))
            ev = evaluate(art, cells)
            rows.append(
                MetricRow(
                    "sweep",
                    {"parameter": parameter, "value": value, "train_fraction": tf, "seed": seed},
                    ev.mae(),
                    {"n_test": len(cells)},
                    ev.latency_stats(),
                )
            )
    return rows


def check_schedule(schedule: Sequence[float]) -> List[float]:
    sched = [float(x) for x in schedule]
    if not sched:
        raise ConfigError("empty density schedule")
    if any(not 0.0 < f < 1.0 for f in sched):
        raise ConfigError("schedule fractions must lie in (0, 1)")
    if any(b < a for a, b in zip(sched, sched[1:])):
        raise ConfigError("density schedule must not decrease")
    return sched


def run_drift(
    cfg: ExperimentConfig,
    schedule: Sequence[float],
    bundle: Optional[DatasetBundle] = None,
    threshold: Optional[float] = None,
    compare_retrain: bool = False,
) -> List[MetricRow]:
    """Train once at ``schedule[0]``, then reveal more of the log step by step.

    At each step the frozen forests and stage-2 model serve predictions from
    fills rebuilt on the denser log. The drift threshold defaults to the MAE
    at the first step. With ``compare_retrain`` a fully retrained pipeline is
    also evaluated at every step.
    """
    sched = check_schedule(schedule)
    bundle = load_bundle(cfg) if bundle is None else bundle
    rows = []
    for seed in cfg.seeds:
        cells = Cells.from_matrix(bundle.matrix)
        n = len(cells)
        perm = np.random.default_rng(seed).permutation(n)
        n_max = int(math.floor(sched[-1] * n))
        pool = cells.take(np.sort(perm[n_max:]))
        if len(pool) == 0:
            raise DataError("no cells left for evaluation at the final density")
        test = sample_cells(pool, cfg.eval_queries, seed)

        def revealed(f):
            idx = np.sort(perm[: int(math.floor(f * n))])
            return cells.take(idx).to_matrix(bundle.matrix.shape)

        base = build_artifacts(revealed(sched[0]), bundle.user_contexts, bundle.service_contexts, cfg.pipeline(seed))
        th = threshold
        for step, f in enumerate(sched):
            matrix = revealed(f)
            art = base if step == 0 else refill(base, matrix)
            ev = evaluate(art, test)
            err = ev.mae()
            if th is None:
                th = err
            extra = {
                "density": density(matrix),
                "threshold": th,
                "retrain_recommended": bool(err > th),
                "mechanism": DRIFT_MECHANISM,
            }
            if compare_retrain:
                fresh = build_artifacts(matrix, bundle.user_contexts, bundle.service_contexts, cfg.pipeline(seed))
                extra["mae_retrained"] = evaluate(fresh, test).mae()
            rows.append(MetricRow("drift", {"step": step, "fraction": f, "seed": seed}, err, extra, ev.latency_stats()))
    return rows


def is_u_shaped(values: Sequence[float], tolerance: float = 0.0) -> bool:
    """True when the curve dips below both ends by more than ``tolerance``."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 3:
        return False
    k = int(np.argmin(v))
    return 0 < k < v.size - 1 and v[0] - v[k] > tolerance and v[-1] - v[k] > tolerance


# ---------------------------------------------------------------------------
# Output


def _flatten(row: MetricRow) -> Dict[str, object]:
    out = {"experiment": row.experiment}
    out.update(row.config)
    out["mae"] = repr(float(row.mae))
    for k, v in row.extra.items():
        out[k] = repr(float(v)) if isinstance(v, float) else v
    return out


def _write_table(path: Path, records: List[Dict[str, object]], header_lines: List[str]) -> None:
    keys: List[str] = []
    for r in records:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.DictWriter(fh, fieldnames=keys, restval="", lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow(r)


def write_rows(rows: Sequence[MetricRow], path, cfg: ExperimentConfig, notes: Sequence[str] = ()) -> Tuple[Path, Path]:
    """Write ``path`` (deterministic metrics) and ``path.timing.csv`` (wall-clock figures)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [f"config {json.dumps(cfg.echo(), sort_keys=True)}"] + list(notes)
    _write_table(path, [_flatten(r) for r in rows], header)
    timing_path = path.with_name(path.stem + ".timing.csv")
    timing = []
    for r in rows:
        rec = {"experiment": r.experiment}
        rec.update(r.config)
        rec.update({k: repr(float(v)) for k, v in r.timing.items()})
        timing.append(rec)
    _write_table(timing_path, timing, ["wall-clock measurements; not reproducible across runs"])
    return path, timing_path


def read_rows(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))
