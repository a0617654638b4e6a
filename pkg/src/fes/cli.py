"""Command-line entry point.

Exit codes: 0 on success, 2 for configuration errors, 3 for data errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional


from . import bench, kernel_bench
from .clustering import ClusterForest, build_forest
from .dataset import SplitSpec, describe, split, write_wsdream
from .engine import FesEngine, Query, build_artifacts
from .errors import ConfigError, FesError
from .imputation import preprocess_all
from .synth import SynthSpec, generate

log = logging.getLogger("fes")


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _factors(text: str):
    out = []
    for part in text.split(","):
        try:
            a, b = part.lower().split("x")
            out.append((int(a), int(b)))
        except ValueError:
            raise ConfigError(f"factor pairs look like '1x1,2x1', got {part!r}") from None
    return out


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", help="WS-DREAM style directory; synthetic data when omitted")
    p.add_argument("--qos", choices=["rt", "tp"], default="rt")
    p.add_argument("--train-frac", type=float, default=0.1)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--nmin", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--wocc", action="store_true", help="skip context-aware clustering")
    p.add_argument("--out", default="fes-out")
    p.add_argument("--full-scale", action="store_true", help="do not cut the data to the desk-scale slice")
    p.add_argument("--users", type=int, default=150, help="desk-scale users")
    p.add_argument("--services", type=int, default=1000, help="desk-scale services")
    p.add_argument("--s2-samples", type=int, default=1800)
    p.add_argument("--s1-epochs", type=int, default=50)
    p.add_argument("--s2-epochs", type=int, default=5000)
    p.add_argument("--feature-cap", type=int, default=None)
    p.add_argument("--eval-queries", type=int, default=200)
    p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fes", description="Clustered two-stage neural QoS prediction")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    for verb, text in (
        ("load", "load a dataset and print a summary"),
        ("cluster", "build UICL and SICL forests on the training split"),
        ("fill", "fill every multi-level cluster (CF and MF)"),
        ("train", "run the whole offline pipeline and save an engine"),
    ):
        _common(sub.add_parser(verb, help=text))

    p = sub.add_parser("predict", help="predict one user-service pair from a saved engine")
    _common(p)
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--service", type=int, required=True)

    p = sub.add_parser("bench", help="run an experiment and write CSV results")
    p.add_argument("experiment", choices=bench.EXPERIMENTS + ("kernels",))
    _common(p)
    p.add_argument("--fractions", help="comma-separated train fractions (default: --train-frac)")
    p.add_argument("--param", choices=bench.SWEEP_PARAMETERS, default="tau")
    p.add_argument("--values", default="0.2,0.5,0.8")
    p.add_argument("--schedule", default="0.05,0.1,0.2,0.4")
    p.add_argument("--factors", default="1x1,2x1,1x2,2x2,3x3")
    p.add_argument("--mask-fraction", type=float, default=0.25)
    p.add_argument("--axis", choices=["users", "services"], default="users")
    p.add_argument("--threshold", type=float, default=None, help="drift threshold (default: MAE at the first step)")

    p = sub.add_parser("synth", help="write a synthetic WS-DREAM style dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=150)
    p.add_argument("--services", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--qos", choices=["rt", "tp"], default="rt")
    return ap


def _config(args, seeds=None) -> bench.ExperimentConfig:
    fractions = _floats(args.fractions) if getattr(args, "fractions", None) else [args.train_frac]
    return bench.ExperimentConfig(
        dataset=args.dataset,
        qos=args.qos,
        train_fractions=tuple(fractions),
        tau=args.tau,
        n_min=args.nmin,
        seeds=tuple(seeds) if seeds is not None else tuple(range(args.seed, args.seed + args.runs)),
        runs=args.runs,
        wocc=args.wocc,
        feature_cap=args.feature_cap,
        out=args.out,
        full_scale=args.full_scale,
        desk_users=args.users,
        desk_services=args.services,
        s2_samples=args.s2_samples,
        s1_epochs=args.s1_epochs,
        s2_epochs=args.s2_epochs,
        eval_queries=args.eval_queries,
        workers=args.workers,
    )


def _train_split(args):
    cfg = _config(args, seeds=[args.seed])
    bundle = bench.load_bundle(cfg)
    train, _, _ = split(bundle, SplitSpec(args.train_frac, args.seed))
    return cfg, bundle, train


def _load_forests(out: Path, train):
    from .dataset import matrix_hash

    u, s = out / "forest" / "uicl.json", out / "forest" / "sicl.json"
    if u.exists() and s.exists():
        uicl, sicl = ClusterForest.load(u), ClusterForest.load(s)
        if uicl.source_hash == matrix_hash(train) == sicl.source_hash:
            return uicl, sicl
    return None


def _cmd_load(args) -> dict:
    cfg = _config(args, seeds=[args.seed])
    return describe(bench.load_bundle(cfg))


def _cmd_cluster(args) -> dict:
    cfg, bundle, train = _train_split(args)
    uc, sc = (None, None) if args.wocc else (bundle.user_contexts, bundle.service_contexts)
    uicl, sicl = build_forest(train, uc, sc, args.tau, args.nmin)
    out = Path(args.out) / "forest"
    out.mkdir(parents=True, exist_ok=True)
    uicl.save(out / "uicl.json")
    sicl.save(out / "sicl.json")
    return {
        f.mode: {
            "first_level": [len(c) for c in f.first_level],
            "multilevel": f.n_multilevel(),
        }
        for f in (uicl, sicl)
    }


def _cmd_fill(args) -> dict:
    cfg, bundle, train = _train_split(args)
    out = Path(args.out)
    forests = _load_forests(out, train)
    if forests is None:
        _cmd_cluster(args)
        forests = _load_forests(out, train)
    store = preprocess_all(train, *forests, cfg.pipeline(args.seed).mf, out_dir=out / "store")
    return {"matrices": len(store), "cells": store.total_cells(), "forest_hash": store.forest_hash}


def _cmd_train(args) -> dict:
    cfg, bundle, train = _train_split(args)
    out = Path(args.out)
    forests = _load_forests(out, train)
    pcfg = cfg.pipeline(args.seed)
    art = build_artifacts(train, bundle.user_contexts, bundle.service_contexts, pcfg, forests=forests)
    engine = FesEngine(art, bundle.user_contexts, bundle.service_contexts)
    engine.save(out)
    return {"out": str(out), "forest_hash": art.forest_hash, "s2_samples": art.model.trained_on, "build_seconds": art.build_seconds}


def _cmd_predict(args) -> dict:
    engine = FesEngine.load(args.out)
    r = engine.predict(Query(args.user, args.service))
    return {
        "user": args.user,
        "service": args.service,
        "value": r.value,
        "stage1_outputs": list(r.stage1_outputs),
        "latency": r.latency,
        "clusters_used": {"UICL": list(r.clusters_used[0]), "SICL": list(r.clusters_used[1])},
    }


def _cmd_bench(args) -> dict:
    if args.experiment == "kernels":
        rows = kernel_bench.compare()
        return {"kernels": rows}
    cfg = _config(args)
    notes = []
    if args.experiment == "accuracy":
        rows = bench.run_accuracy(cfg)
    elif args.experiment == "responsiveness":
        rows = bench.run_responsiveness(cfg)
    elif args.experiment == "scalability":
        rows = bench.run_scalability(cfg, _factors(args.factors))
    elif args.experiment == "cold_start":
        rows = bench.run_cold_start(cfg, args.mask_fraction, args.axis)
    elif args.experiment == "sweep":
        values = _floats(args.values)
        if args.param != "tau":
            values = [int(v) for v in values]
        rows = bench.run_sweep(cfg, args.param, values)
    else:
        rows = bench.run_drift(cfg, _floats(args.schedule), threshold=args.threshold)
        notes.append(f"drift mechanism: {bench.DRIFT_MECHANISM}")
    out = Path(args.out)
    path = out if out.suffix == ".csv" else out / f"{args.experiment}.csv"
    main_csv, timing_csv = bench.write_rows(rows, path, cfg, notes)
    return {"results": str(main_csv), "timing": str(timing_csv), "rows": len(rows)}


def _cmd_synth(args) -> dict:
    bundle = generate(SynthSpec(args.users, args.services, seed=args.seed, qos_kind=args.qos))
    path = write_wsdream(bundle, args.out)
    return dict(describe(bundle), out=str(path))


COMMANDS = {
    "load": _cmd_load,
    "cluster": _cmd_cluster,
    "fill": _cmd_fill,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "bench": _cmd_bench,
    "synth": _cmd_synth,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"fes: configuration error: {exc}", file=sys.stderr)
        return 2
    except FesError as exc:
        print(f"fes: data error: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(result, indent=1, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
