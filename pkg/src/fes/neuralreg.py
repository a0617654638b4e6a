"""Feed-forward regressors and the two-stage fused predictor.

Stage 1 trains four small networks per query, one per filled matrix of the
query's clusters: each network maps a user's QoS row (minus the target
service) to the target service's value, is trained on the other users of
the cluster and then evaluated on the target user. Stage 2 is a single
network, trained offline, that fuses the four stage-1 outputs.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from itertools import islice
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import _kernels
from .errors import ConfigError, DataError, InsufficientClusterError, StaleModelError, TrainingDivergedError
from .imputation import FilledMatrix, FilledQuad, PreprocessedStore
from .metrics import cosine_to

log = logging.getLogger(__name__)

MODEL_FORMAT = "fes-model/1"


@dataclass(frozen=True)
class MlpSpec:
    """Architecture and optimiser settings of one network.

    ``n_inputs`` may be left as ``None`` and is then taken from the data.
    Hidden units are sigmoid, the single output is linear, and the cost is
    mean squared error minimised by gradient descent with momentum.
    """

    hidden: Tuple[int, ...] = (32, 16)
    n_inputs: Optional[int] = None
    lr: float = 0.01
    momentum: float = 0.9
    batch: Union[int, str] = 1
    max_epochs: int = 50
    min_gradient: float = 1e-5
    seed: int = 0
    hidden_activation: str = "sigmoid"
    output_activation: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.hidden) < 1 or min(self.hidden) < 1:
            raise ConfigError("need at least one hidden layer with >= 1 unit")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.batch != "full" and (not isinstance(self.batch, int) or self.batch < 1):
            raise ConfigError(f"batch must be a positive int or 'full', got {self.batch!r}")
        if self.hidden_activation != "sigmoid" or self.output_activation != "linear":
            raise ConfigError("only sigmoid hidden units and a linear output are supported")
        if self.n_inputs is not None and self.n_inputs < 1:
            raise ConfigError("n_inputs must be >= 1")

    def layer_sizes(self, n_inputs: Optional[int] = None) -> Tuple[int, ...]:
        n_in = self.n_inputs if n_inputs is None else n_inputs
        if n_in is None:
            raise ConfigError("input size unknown")
        return (int(n_in),) + self.hidden + (1,)


STAGE1 = MlpSpec(hidden=(32, 16), batch=1, max_epochs=50, min_gradient=1e-5)
STAGE2 = MlpSpec(hidden=(8, 8), n_inputs=4, batch=100, max_epochs=5000, min_gradient=1e-7)


@dataclass(frozen=True)
class MinMaxScaler:
    """Per-feature affine map of the training range onto [0, 1].

    Features that were constant during fitting keep unit range (they map to 0).
    """

    low: np.ndarray
    span: np.ndarray
    constant: np.ndarray

    @classmethod
    def fit(cls, X) -> "MinMaxScaler":
        X = np.asarray(X, dtype=np.float64)
        low = X.min(axis=0)
        span = X.max(axis=0) - low
        constant = span <= 0
        return cls(low, np.where(constant, 1.0, span), constant)

    def transform(self, X):
        return (np.asarray(X, dtype=np.float64) - self.low) / self.span

    def inverse(self, Z):
        return np.asarray(Z, dtype=np.float64) * self.span + self.low

    def to_dict(self):
        return {"low": self.low.tolist(), "span": self.span.tolist(), "constant": self.constant.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["low"], float), np.asarray(d["span"], float), np.asarray(d["constant"], bool))


def n_params(sizes: Sequence[int]) -> int:
    return sum(b * a + b for a, b in zip(sizes[:-1], sizes[1:]))


def unpack(sizes: Sequence[int], params: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Views ``(W, b)`` per layer into a flat parameter vector."""
    out, pos = [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        w = params[pos : pos + a * b].reshape(b, a)
        pos += a * b
        out.append((w, params[pos : pos + b]))
        pos += b
    return out


def init_params(sizes: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    parts = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(a)
        parts.append(rng.uniform(-bound, bound, size=a * b + b))
    return np.concatenate(parts)


def _sigmoid(z):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def forward(sizes: Sequence[int], params: np.ndarray, X: np.ndarray) -> np.ndarray:
    a = X
    layers = unpack(sizes, params)
    for k, (w, b) in enumerate(layers):
        z = a @ w.T + b
        a = z if k == len(layers) - 1 else _sigmoid(z)
    return a[:, 0]


def loss_and_gradient(sizes: Sequence[int], params: np.ndarray, X: np.ndarray, y: np.ndarray):
    """Mean of ``0.5 * (y_hat - y)**2`` over all samples and its gradient (flat)."""
    layers = unpack(sizes, params)
    acts = [X]
    for k, (w, b) in enumerate(layers):
        z = acts[-1] @ w.T + b
        acts.append(z if k == len(layers) - 1 else _sigmoid(z))
    n = X.shape[0]
    delta = acts[-1] - y[:, None]
    loss = 0.5 * float(np.mean(delta**2))
    grads = [None] * len(layers)
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        grads[k] = np.concatenate([(delta.T @ acts[k]).ravel() / n, delta.sum(axis=0) / n])
        if k > 0:
            a = acts[k]
            delta = (delta @ w) * a * (1.0 - a)
    return loss, np.concatenate(grads)


@dataclass
class TrainedMlp:
    sizes: Tuple[int, ...]
    params: np.ndarray
    input_scaler: MinMaxScaler
    target_scaler: MinMaxScaler
    epochs_run: int = 0
    losses: List[float] = field(default_factory=list)
    grad_norm: float = float("nan")

    @property
    def weights(self) -> List[np.ndarray]:
        return [w for w, _ in unpack(self.sizes, self.params)]

    @property
    def biases(self) -> List[np.ndarray]:
        return [b for _, b in unpack(self.sizes, self.params)]

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.sizes[0]:
            raise DataError(f"expected {self.sizes[0]} features, got {X.shape[1]}")
        z = forward(self.sizes, self.params, self.input_scaler.transform(X))
        return self.target_scaler.inverse(z[:, None])[:, 0]

    def to_dict(self) -> dict:
        layers = unpack(self.sizes, self.params)
        return {
            "layer_sizes": list(self.sizes),
            "weights": [w.tolist() for w, _ in layers],
            "biases": [b.tolist() for _, b in layers],
            "input_scaler": self.input_scaler.to_dict(),
            "target_scaler": self.target_scaler.to_dict(),
            "epochs_run": self.epochs_run,
            "grad_norm": self.grad_norm,
        }

    @classmethod
    def from_dict(cls, d) -> "TrainedMlp":
        sizes = tuple(d["layer_sizes"])
        parts = []
        for w, b in zip(d["weights"], d["biases"]):
            parts.append(np.asarray(w, dtype=np.float64).ravel())
            parts.append(np.asarray(b, dtype=np.float64))
        params = np.concatenate(parts)
        if params.size != n_params(sizes):
            raise DataError("model weights do not match layer sizes")
        return cls(
            sizes,
            params,
            MinMaxScaler.from_dict(d["input_scaler"]),
            MinMaxScaler.from_dict(d["target_scaler"]),
            d.get("epochs_run", 0),
            grad_norm=d.get("grad_norm", float("nan")),
        )


def train_mlp(spec: MlpSpec, samples, targets, rng: Optional[np.random.Generator] = None) -> TrainedMlp:
    """Fit a network by backpropagation with momentum on min-max scaled data.

    Training stops after ``max_epochs`` or once the L2 norm of the full-batch
    gradient, evaluated at the end of an epoch, falls below ``min_gradient``.
    """
    X = np.asarray(samples, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] < 1:
        raise DataError("need a 2-D sample matrix with at least one row")
    if y.shape[0] != X.shape[0]:
        raise DataError(f"{X.shape[0]} samples but {y.shape[0]} targets")
    if spec.n_inputs is not None and X.shape[1] != spec.n_inputs:
        raise DataError(f"spec expects {spec.n_inputs} features, data has {X.shape[1]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DataError("training data contains NaN or infinity")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    sizes = spec.layer_sizes(X.shape[1])
    xs = MinMaxScaler.fit(X)
    ts = MinMaxScaler.fit(y[:, None])
    Xs = np.ascontiguousarray(xs.transform(X))
    ys = np.ascontiguousarray(ts.transform(y[:, None])[:, 0])
    params = init_params(sizes, rng)
    velocity = np.zeros_like(params)
    sizes_arr = np.asarray(sizes, dtype=np.intp)
    n = X.shape[0]
    batch = n if spec.batch == "full" else min(int(spec.batch), n)

    loss, grad = loss_and_gradient(sizes, params, Xs, ys)
    losses = [loss]
    gnorm = float(np.linalg.norm(grad))
    epoch = 0
    for epoch in range(1, spec.max_epochs + 1):
        order = rng.permutation(n).astype(np.intp)
        _kernels.sgd_epoch(sizes_arr, params, velocity, Xs, ys, order, batch, spec.lr, spec.momentum)
        if not np.all(np.isfinite(params)):
            raise TrainingDivergedError("non-finite weights", epoch)
        loss, grad = loss_and_gradient(sizes, params, Xs, ys)
        if not math.isfinite(loss):
            raise TrainingDivergedError("non-finite loss", epoch)
        losses.append(loss)
        gnorm = float(np.linalg.norm(grad))
        if gnorm < spec.min_gradient:
            break
    return TrainedMlp(sizes, params, xs, ts, epoch, losses, gnorm)


# ---------------------------------------------------------------------------
# Stage 1


def _stage1_problem(fm: FilledMatrix, user: int, service: int, feature_cap: Optional[int]):
    n_u, n_s = fm.values.shape
    if n_u < 2 or n_s < 2:
        raise InsufficientClusterError(
            f"insufficient cluster for stage-1: {n_u} users x {n_s} services (need >= 2 x 2)"
        )
    r, c = fm.row(user), fm.col(service)
    rows = np.delete(np.arange(n_u), r)
    cols = np.delete(np.arange(n_s), c)
    if feature_cap is not None and len(cols) > feature_cap:
        # keep the services whose columns are most similar to the target's
        train = fm.values[rows]
        sims = cosine_to(train[:, c], train[:, cols].T)
        keep = np.sort(np.argsort(-sims, kind="stable")[:feature_cap])
        cols = cols[keep]
    X = fm.values[np.ix_(rows, cols)]
    y = fm.values[rows, c]
    x_query = fm.values[r, cols]
    return X, y, x_query


def stage1_seed(seed: int, user: int, service: int, which: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, user, service, which]))


def nregs1_predict(
    quad: FilledQuad,
    target_user: int,
    target_service: int,
    spec: MlpSpec = STAGE1,
    feature_cap: Optional[int] = None,
) -> np.ndarray:
    """Four stage-1 predictions in the order (UICL/CF, UICL/MF, SICL/CF, SICL/MF)."""
    out = np.empty(4)
    for which, fm in enumerate(quad.matrices()):
        X, y, xq = _stage1_problem(fm, target_user, target_service, feature_cap)
        net = train_mlp(spec, X, y, rng=stage1_seed(spec.seed, target_user, target_service, which))
        out[which] = net.predict(xq[None, :])[0]
    return out


# ---------------------------------------------------------------------------
# Stage 2


@dataclass
class S2TrainingSet:
    features: np.ndarray
    targets: np.ndarray
    pairs: np.ndarray
    groups: np.ndarray
    complete: bool


def round_robin_pairs(groups: Sequence[np.ndarray]) -> Iterator[Tuple[int, Tuple[int, int]]]:
    """Yield ``(group, pair)`` taking one not-yet-used pair from each group in turn."""
    cursors = [0] * len(groups)
    seen = set()
    active = [g for g in range(len(groups)) if len(groups[g])]
    while active:
        still = []
        for g in active:
            grp, c = groups[g], cursors[g]
            while c < len(grp) and (int(grp[c][0]), int(grp[c][1])) in seen:
                c += 1
            if c < len(grp):
                pair = (int(grp[c][0]), int(grp[c][1]))
                seen.add(pair)
                c += 1
                yield g, pair
            cursors[g] = c
            if c < len(grp):
                still.append(g)
        active = still


def cluster_pairs(train: np.ndarray, store: PreprocessedStore, rng: np.random.Generator) -> List[np.ndarray]:
    """Valid training pairs of every multi-level cluster (UICL first, then SICL), shuffled."""
    groups = []
    for forest in (store.uicl, store.sicl):
        for k, j in forest.multilevel():
            users, services = forest.members(k, j)
            sub = train[np.ix_(users, services)]
            r, c = np.nonzero(sub)
            pairs = np.stack([users[r], services[c]], axis=1)
            groups.append(pairs[rng.permutation(len(pairs))])
    return groups


def build_s2_training_set(
    train: np.ndarray,
    store: PreprocessedStore,
    n_samples: int,
    spec1: MlpSpec = STAGE1,
    seed: int = 0,
    feature_cap: Optional[int] = None,
    workers: int = 1,
) -> S2TrainingSet:
    """Sample valid pairs round-robin over all multi-level clusters and run stage 1 on each.

    A pair reachable through several clusters is used once. Pairs whose
    clusters are too small for stage 1 are skipped. ``complete`` is False
    when fewer than ``n_samples`` pairs were available.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    draws = round_robin_pairs(cluster_pairs(train, store, rng))

    def job(item):
        _, (u, s) = item
        try:
            return nregs1_predict(store.lookup(u, s), u, s, spec1, feature_cap)
        except InsufficientClusterError:
            return None

    feats, targets, pairs, groups = [], [], [], []
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        while len(pairs) < n_samples:
            chunk = list(islice(draws, n_samples - len(pairs)))
            if not chunk:
                break
            results = pool.map(job, chunk) if pool else map(job, chunk)
            for (g, (u, s)), f in zip(chunk, results):
                if f is None:
                    continue
                feats.append(f)
                targets.append(train[u, s])
                pairs.append((u, s))
                groups.append(g)
    finally:
        if pool:
            pool.shutdown()
    complete = len(pairs) >= n_samples
    if not complete:
        log.warning("only %d of %d stage-2 samples available", len(pairs), n_samples)
    return S2TrainingSet(
        np.asarray(feats, dtype=np.float64).reshape(-1, 4),
        np.asarray(targets, dtype=np.float64),
        np.asarray(pairs, dtype=np.intp).reshape(-1, 2),
        np.asarray(groups, dtype=np.intp),
        complete,
    )


@dataclass
class FusedModel:
    """Persisted stage-2 network plus everything needed to serve it."""

    s2: TrainedMlp
    forest_hash: str
    spec1: MlpSpec
    spec2: MlpSpec
    trained_on: int
    feature_cap: Optional[int] = None

    def predict(self, stage1_outputs) -> np.ndarray:
        return self.s2.predict(np.atleast_2d(stage1_outputs))

    def check(self, store: PreprocessedStore) -> None:
        if store.forest_hash != self.forest_hash:
            raise StaleModelError(
                f"model built for forests {self.forest_hash[:12]} but store has {store.forest_hash[:12]}"
            )

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "forest_hash": self.forest_hash,
            "trained_on": self.trained_on,
            "feature_cap": self.feature_cap,
            "spec1": asdict(self.spec1),
            "spec2": asdict(self.spec2),
            "s2": self.s2.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d, expected_forest_hash: Optional[str] = None) -> "FusedModel":
        if d.get("format") != MODEL_FORMAT:
            raise DataError(f"unsupported model format {d.get('format')!r}")
        if expected_forest_hash is not None and d["forest_hash"] != expected_forest_hash:
            raise StaleModelError("model forest hash does not match the store")
        return cls(
            s2=TrainedMlp.from_dict(d["s2"]),
            forest_hash=d["forest_hash"],
            spec1=MlpSpec(**d["spec1"]),
            spec2=MlpSpec(**d["spec2"]),
            trained_on=d["trained_on"],
            feature_cap=d.get("feature_cap"),
        )

    @classmethod
    def load(cls, path, expected_forest_hash: Optional[str] = None) -> "FusedModel":
        return cls.from_dict(json.loads(Path(path).read_text()), expected_forest_hash)


def train_s2(
    features,
    targets,
    spec2: MlpSpec = STAGE2,
    forest_hash: str = "",
    spec1: MlpSpec = STAGE1,
    feature_cap: Optional[int] = None,
) -> FusedModel:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != 4:
        raise DataError(f"stage-2 features must have shape (n, 4), got {features.shape}")
    spec2 = replace(spec2, n_inputs=4)
    net = train_mlp(spec2, features, targets)
    return FusedModel(net, forest_hash, spec1, spec2, int(features.shape[0]), feature_cap)
