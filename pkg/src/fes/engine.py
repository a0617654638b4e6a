"""Semi-offline prediction runtime.

The expensive artifacts (cluster forests, filled matrices, the stage-2
network) are built offline by :func:`build_artifacts`. A query only trains
the four small stage-1 networks and runs stage-2 inference. Observations go
to a live log that is read again only by a retrain.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .clustering import ClusterForest, build_forest, forest_pair_hash
from .dataset import density, export_triples, matrix_hash, read_triples
from .errors import ColdStartError, DataError
from .imputation import MfParams, PreprocessedStore, preprocess_all
from .neuralreg import STAGE1, STAGE2, FusedModel, MlpSpec, build_s2_training_set, nregs1_predict, train_s2

ENGINE_FORMAT = "fes-engine/1"


@dataclass(frozen=True)
class PipelineConfig:
    tau: float = 0.5
    n_min: int = 100
    wocc: bool = False
    cf_k: int = 10
    mf: MfParams = MfParams()
    s2_samples: int = 1800
    spec1: MlpSpec = STAGE1
    spec2: MlpSpec = STAGE2
    feature_cap: Optional[int] = None
    seed: int = 0
    workers: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        d["mf"] = MfParams(**d["mf"])
        d["spec1"] = MlpSpec(**d["spec1"])
        d["spec2"] = MlpSpec(**d["spec2"])
        return cls(**d)


@dataclass(frozen=True)
class Query:
    target_user: int
    target_service: int


@dataclass(frozen=True)
class PredictionResult:
    value: float
    stage1_outputs: Tuple[float, float, float, float]
    latency: float
    clusters_used: Tuple[Tuple[int, int], Tuple[int, int]]


@dataclass(frozen=True)
class DriftReport:
    density_at_train: float
    density_now: float
    recent_mae: float
    threshold: float
    retrain_recommended: bool


@dataclass(frozen=True)
class Artifacts:
    """One consistent set of offline artifacts; never mutated after creation."""

    uicl: ClusterForest
    sicl: ClusterForest
    store: PreprocessedStore
    model: FusedModel
    train_matrix: np.ndarray
    config: PipelineConfig
    build_seconds: float = 0.0

    @property
    def forest_hash(self) -> str:
        return self.store.forest_hash

    def fingerprint(self) -> str:
        return "|".join([self.forest_hash, self.store.content_hash(), self.model.to_json()])


def drift_check(recent_errors: Sequence[float], threshold: float, density_at_train=float("nan"), density_now=float("nan")) -> DriftReport:
    errors = np.abs(np.asarray(recent_errors, dtype=np.float64))
    if errors.size == 0:
        raise DataError("drift check needs at least one recent error")
    mae = float(errors.mean())
    return DriftReport(density_at_train, density_now, mae, float(threshold), mae > threshold)


def build_artifacts(
    train: np.ndarray,
    user_contexts: Optional[np.ndarray],
    service_contexts: Optional[np.ndarray],
    config: PipelineConfig = PipelineConfig(),
    store_dir=None,
    forests: Optional[Tuple[ClusterForest, ClusterForest]] = None,
) -> Artifacts:
    """Cluster, fill and train stage 2 on a training matrix."""
    t0 = time.perf_counter()
    train = np.array(train, dtype=np.float64)
    if not np.any(train > 0):
        raise DataError("training matrix has no valid entries")
    if config.wocc:
        user_contexts = service_contexts = None
    if forests is None:
        uicl, sicl = build_forest(train, user_contexts, service_contexts, config.tau, config.n_min)
    else:
        uicl, sicl = forests
    store = preprocess_all(train, uicl, sicl, config.mf, config.cf_k, out_dir=store_dir)
    ts = build_s2_training_set(
        train, store, config.s2_samples, config.spec1, config.seed, config.feature_cap, config.workers
    )
    if ts.features.shape[0] == 0:
        raise DataError("no stage-2 training samples could be drawn")
    model = train_s2(ts.features, ts.targets, config.spec2, store.forest_hash, config.spec1, config.feature_cap)
    train.setflags(write=False)
    return Artifacts(uicl, sicl, store, model, train, config, time.perf_counter() - t0)


def refill(artifacts: Artifacts, matrix: np.ndarray) -> Artifacts:
    """Same forests and stage-2 model, fills rebuilt from ``matrix``."""
    cfg = artifacts.config
    store = preprocess_all(matrix, artifacts.uicl, artifacts.sicl, cfg.mf, cfg.cf_k)
    return replace(artifacts, store=store, train_matrix=np.array(matrix, dtype=np.float64))


def predict_with(artifacts: Artifacts, query: Query) -> PredictionResult:
    """One query against a fixed artifact set."""
    t0 = time.perf_counter()
    u, s = int(query.target_user), int(query.target_service)
    n_users, n_services = artifacts.train_matrix.shape
    if not (0 <= u < n_users and 0 <= s < n_services):
        raise ColdStartError(f"unknown pair ({u}, {s}); add the entity to the log and retrain")
    if not artifacts.uicl.has_context:
        if not np.any(artifacts.train_matrix[u]):
            raise ColdStartError(f"user {u} has no QoS record and no context is available")
        if not np.any(artifacts.train_matrix[:, s]):
            raise ColdStartError(f"service {s} has no QoS record and no context is available")
    artifacts.model.check(artifacts.store)
    quad = artifacts.store.lookup(u, s)
    cfg = artifacts.config
    s1 = nregs1_predict(quad, u, s, cfg.spec1, cfg.feature_cap)
    value = float(artifacts.model.predict(s1)[0])
    return PredictionResult(
        value,
        tuple(float(x) for x in s1),
        time.perf_counter() - t0,
        (artifacts.uicl.lookup(u, s), artifacts.sicl.lookup(u, s)),
    )


class FesEngine:
    """Serves predictions from the current artifact set and collects observations.

    ``predict`` reads one artifact snapshot, so a concurrent ``retrain`` is
    seen either entirely or not at all.
    """

    def __init__(self, artifacts: Artifacts, user_contexts=None, service_contexts=None, drift_threshold=0.0398):
        self._artifacts = artifacts
        self._swap_lock = threading.Lock()
        self._log_lock = threading.Lock()
        self._log = np.array(artifacts.train_matrix, dtype=np.float64)
        self.user_contexts = user_contexts
        self.service_contexts = service_contexts
        self.drift_threshold = float(drift_threshold)
        self.density_at_train = density(artifacts.train_matrix)

    @classmethod
    def train(cls, train, user_contexts=None, service_contexts=None, config=PipelineConfig(), **kw) -> "FesEngine":
        art = build_artifacts(train, user_contexts, service_contexts, config)
        return cls(art, user_contexts, service_contexts, **kw)

    @property
    def artifacts(self) -> Artifacts:
        return self._artifacts

    @property
    def log(self) -> np.ndarray:
        with self._log_lock:
            return self._log.copy()

    @property
    def density_now(self) -> float:
        with self._log_lock:
            return density(self._log)

    def predict(self, query: Query) -> PredictionResult:
        return predict_with(self._artifacts, query)

    def observe(self, user: int, service: int, value: float) -> float:
        """Record an observed QoS value (last write wins); returns the new log density."""
        if not (isinstance(value, (int, float, np.floating)) and math.isfinite(value) and value > 0):
            raise DataError(f"observed value must be a positive number, got {value!r}")
        with self._log_lock:
            n_users, n_services = self._log.shape
            if not (0 <= user < n_users and 0 <= service < n_services):
                raise DataError(f"pair ({user}, {service}) outside the {n_users}x{n_services} log")
            self._log[user, service] = float(value)
            return density(self._log)

    def drift_check(self, recent_errors, threshold: Optional[float] = None) -> DriftReport:
        th = self.drift_threshold if threshold is None else threshold
        return drift_check(recent_errors, th, self.density_at_train, self.density_now)

    def retrain(self, config: Optional[PipelineConfig] = None) -> Artifacts:
        """Rebuild every artifact from the live log, then publish them in one step."""
        cfg = self._artifacts.config if config is None else config
        new = build_artifacts(self.log, self.user_contexts, self.service_contexts, cfg)
        with self._swap_lock:
            self._artifacts = new
            self.density_at_train = density(new.train_matrix)
        return new

    # -- persistence -------------------------------------------------------

    def save(self, path) -> Path:
        """Write ``forest/``, ``store/``, ``model.json``, ``log.csv`` and ``manifest.json``.

        The directory is assembled aside and renamed into place.
        """
        root = Path(path)
        root.parent.mkdir(parents=True, exist_ok=True)
        art = self._artifacts
        tmp = Path(tempfile.mkdtemp(prefix=".fes-", dir=root.parent))
        try:
            (tmp / "forest").mkdir()
            art.uicl.save(tmp / "forest" / "uicl.json")
            art.sicl.save(tmp / "forest" / "sicl.json")
            art.store.save(tmp / "store")
            art.model.save(tmp / "model.json")
            export_triples(self.log, tmp / "log.csv")
            export_triples(art.train_matrix, tmp / "train.csv")
            ctx = {
                "user": None if self.user_contexts is None else np.asarray(self.user_contexts).tolist(),
                "service": None if self.service_contexts is None else np.asarray(self.service_contexts).tolist(),
            }
            manifest = {
                "format": ENGINE_FORMAT,
                "shape": list(art.train_matrix.shape),
                "forest_hash": art.forest_hash,
                "train_hash": matrix_hash(art.train_matrix),
                "density_at_train": self.density_at_train,
                "drift_threshold": self.drift_threshold,
                "config": art.config.to_dict(),
                "contexts": ctx,
            }
            (tmp / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
            if root.exists():
                shutil.rmtree(root)
            os.replace(tmp, root)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        return root

    @classmethod
    def load(cls, path) -> "FesEngine":
        root = Path(path)
        mpath = root / "manifest.json"
        if not mpath.exists():
            raise DataError("not an engine directory (manifest.json missing)", root)
        manifest = json.loads(mpath.read_text())
        if manifest.get("format") != ENGINE_FORMAT:
            raise DataError(f"unsupported engine format {manifest.get('format')!r}", mpath)
        shape = tuple(manifest["shape"])
        uicl = ClusterForest.load(root / "forest" / "uicl.json")
        sicl = ClusterForest.load(root / "forest" / "sicl.json")
        store = PreprocessedStore.load(root / "store", uicl, sicl)
        model = FusedModel.load(root / "model.json", forest_pair_hash(uicl, sicl))
        train = read_triples(root / "train.csv", shape)
        train.setflags(write=False)
        config = PipelineConfig.from_dict(manifest["config"])
        art = Artifacts(uicl, sicl, store, model, train, config)
        ctx = manifest["contexts"]
        uc = None if ctx["user"] is None else np.asarray(ctx["user"], dtype=np.float64)
        sc = None if ctx["service"] is None else np.asarray(ctx["service"], dtype=np.float64)
        eng = cls(art, uc, sc, manifest["drift_threshold"])
        eng._log = read_triples(root / "log.csv", shape)
        eng.density_at_train = manifest["density_at_train"]
        return eng
