"""Sparsity filling of multi-level cluster matrices.

Every multi-level cluster of both forests is filled twice: once by
user-based cosine collaborative filtering and once by matrix factorisation.
For any user-service pair the store then yields four dense matrices that
contain the pair (UICL/CF, UICL/MF, SICL/CF, SICL/MF).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from . import _kernels
from .clustering import SICL, UICL, ClusterForest, forest_pair_hash
from .errors import DataError, EmptyMatrixError, StaleModelError
from .metrics import cosine_matrix

log = logging.getLogger(__name__)

STORE_FORMAT = "fes-store/1"
FILL_KINDS = ("cf", "mf")


@dataclass(frozen=True)
class MfParams:
    rank: int = 10
    reg: float = 0.01
    lr: float = 0.005
    epochs: int = 200
    seed: int = 0
    floor: float = 1e-6


@dataclass(frozen=True)
class FilledMatrix:
    """A dense cluster matrix with its global user and service ids (both ascending)."""

    values: np.ndarray
    user_ids: np.ndarray
    service_ids: np.ndarray

    def row(self, user: int) -> int:
        return _local(self.user_ids, user, "user")

    def col(self, service: int) -> int:
        return _local(self.service_ids, service, "service")

    def __contains__(self, pair) -> bool:
        u, s = pair
        return bool(np.isin(u, self.user_ids)) and bool(np.isin(s, self.service_ids))


def _local(ids: np.ndarray, gid: int, what: str) -> int:
    i = int(np.searchsorted(ids, gid))
    if i >= len(ids) or ids[i] != gid:
        raise DataError(f"{what} {gid} is not in this cluster")
    return i


@dataclass(frozen=True)
class FilledQuad:
    q_u_c: FilledMatrix
    q_u_m: FilledMatrix
    q_s_c: FilledMatrix
    q_s_m: FilledMatrix

    def matrices(self) -> Tuple[FilledMatrix, FilledMatrix, FilledMatrix, FilledMatrix]:
        return (self.q_u_c, self.q_u_m, self.q_s_c, self.q_s_m)


def _require_valid(sub: np.ndarray) -> np.ndarray:
    sub = np.asarray(sub, dtype=np.float64)
    if sub.ndim != 2:
        raise DataError("expected a 2-D matrix")
    if not np.any(sub != 0):
        raise EmptyMatrixError("nothing to anchor imputation: matrix has no valid entry")
    return sub


def _fallback_means(sub: np.ndarray, valid: np.ndarray):
    counts_r = valid.sum(axis=1)
    counts_c = valid.sum(axis=0)
    row_mean = np.divide(sub.sum(axis=1), counts_r, out=np.full(sub.shape[0], np.nan), where=counts_r > 0)
    col_mean = np.divide(sub.sum(axis=0), counts_c, out=np.full(sub.shape[1], np.nan), where=counts_c > 0)
    global_mean = sub[valid].mean()
    return row_mean, col_mean, global_mean


def cf_fill(sub: np.ndarray, k: int = 10) -> np.ndarray:
    """Fill missing cells by a similarity-weighted average over the top-``k`` neighbours.

    Neighbours are the users with positive cosine similarity that rated the
    column. Cells without such neighbours fall back to the user's mean, then
    the column mean, then the global mean. Valid cells are left untouched.
    """
    sub = _require_valid(sub)
    valid = sub != 0
    out = sub.copy()
    if valid.all():
        return out
    sim = cosine_matrix(sub)
    np.fill_diagonal(sim, 0.0)
    row_mean, col_mean, global_mean = _fallback_means(sub, valid)
    for i in np.flatnonzero(~valid.all(axis=1)):
        miss = np.flatnonzero(~valid[i])
        s = sim[i]
        weights = np.where(valid[:, miss] & (s[:, None] > 0), s[:, None], 0.0)
        if weights.shape[0] > k:
            top = np.argsort(-weights, axis=0, kind="stable")[:k]
            weights = np.take_along_axis(weights, top, axis=0)
            ratings = np.take_along_axis(sub[:, miss], top, axis=0)
        else:
            ratings = sub[:, miss]
        num = (weights * ratings).sum(axis=0)
        den = weights.sum(axis=0)
        if np.isfinite(row_mean[i]):
            fb = np.full(len(miss), row_mean[i])
        else:
            fb = np.where(np.isfinite(col_mean[miss]), col_mean[miss], global_mean)
        out[i, miss] = np.where(den > 0, num / np.where(den > 0, den, 1.0), fb)
    return out


def mf_factorize(sub: np.ndarray, params: MfParams):
    """Fit ``sub ~ scale * P @ Q.T`` on valid cells by SGD.

    Values are divided by their mean before fitting so one learning rate
    suits both response times and throughputs. Returns ``(P, Q, scale,
    losses)`` where ``losses[e]`` is the mean squared error on the scaled
    valid cells after epoch ``e``.
    """
    sub = _require_valid(sub)
    if params.rank < 1:
        raise DataError("rank must be >= 1")
    rows, cols = np.nonzero(sub)
    rows = rows.astype(np.intp)
    cols = cols.astype(np.intp)
    scale = float(sub[rows, cols].mean())
    vals = sub[rows, cols] / scale
    rng = np.random.default_rng(params.seed)
    P = rng.uniform(0.0, 0.1, size=(sub.shape[0], params.rank))
    Q = rng.uniform(0.0, 0.1, size=(sub.shape[1], params.rank))
    losses = np.empty(params.epochs)
    for e in range(params.epochs):
        order = rng.permutation(len(vals)).astype(np.intp)
        _kernels.mf_epoch(rows, cols, vals, P, Q, order, params.lr, params.reg)
        resid = vals - np.einsum("ij,ij->i", P[rows], Q[cols])
        losses[e] = float(np.mean(resid**2))
    return P, Q, scale, losses


def mf_fill(
    sub: np.ndarray,
    rank: int = 10,
    reg: float = 0.01,
    epochs: int = 200,
    lr: float = 0.005,
    seed: int = 0,
    floor: float = 1e-6,
) -> np.ndarray:
    """Low-rank reconstruction with the valid cells written back verbatim.

    Rows or columns without any valid cell cannot be reconstructed; they take
    column (respectively row) means instead. The output never drops below
    ``floor``, so no cell reads as "invalid".
    """
    params = MfParams(rank=rank, reg=reg, lr=lr, epochs=epochs, seed=seed, floor=floor)
    return _mf_fill(sub, params)


def _mf_fill(sub: np.ndarray, params: MfParams) -> np.ndarray:
    sub = _require_valid(sub)
    P, Q, scale, _ = mf_factorize(sub, params)
    valid = sub != 0
    out = scale * (P @ Q.T)
    row_mean, col_mean, global_mean = _fallback_means(sub, valid)
    col_fb = np.where(np.isfinite(col_mean), col_mean, global_mean)
    row_fb = np.where(np.isfinite(row_mean), row_mean, global_mean)
    empty_rows = ~valid.any(axis=1)
    empty_cols = ~valid.any(axis=0)
    if empty_rows.any():
        out[empty_rows] = col_fb[None, :]
    if empty_cols.any():
        out[:, empty_cols] = row_fb[:, None]
    np.maximum(out, params.floor, out=out)
    out[valid] = sub[valid]
    return out


def _mean_fill(sub: np.ndarray, reference: np.ndarray, user_ids, service_ids) -> np.ndarray:
    # cluster without any observation: borrow column means of the whole log
    valid = reference != 0
    _, col_mean, global_mean = _fallback_means(reference, valid)
    col = col_mean[service_ids]
    col = np.where(np.isfinite(col), col, global_mean)
    return np.broadcast_to(col, (len(user_ids), len(service_ids))).copy()


# ---------------------------------------------------------------------------
# Store


class PreprocessedStore:
    """Filled matrices for every multi-level cluster of a UICL/SICL forest pair.

    The store is read-only once built; ``lookup`` hands out the four matrices
    that contain a user-service pair.
    """

    def __init__(self, uicl: ClusterForest, sicl: ClusterForest, fills: Dict, meta: Optional[dict] = None):
        self.uicl = uicl
        self.sicl = sicl
        self.forest_hash = forest_pair_hash(uicl, sicl)
        self._fills = fills
        self.meta = dict(meta or {})
        for arrays in fills.values():
            for fm in arrays:
                fm.values.setflags(write=False)

    def __len__(self):
        return 2 * len(self._fills)

    def keys(self):
        return sorted(self._fills)

    def get(self, mode: str, k: int, j: int) -> Tuple[FilledMatrix, FilledMatrix]:
        return self._fills[(mode, k, j)]

    def lookup(self, user: int, service: int) -> FilledQuad:
        ku, ju = self.uicl.lookup(user, service)
        ks, js = self.sicl.lookup(user, service)
        u_c, u_m = self._fills[(UICL, ku, ju)]
        s_c, s_m = self._fills[(SICL, ks, js)]
        return FilledQuad(u_c, u_m, s_c, s_m)

    def total_cells(self) -> int:
        return sum(fm.values.size for arrays in self._fills.values() for fm in arrays)

    def content_hash(self) -> str:
        h = hashlib.sha256(self.forest_hash.encode())
        for key in self.keys():
            for fm in self._fills[key]:
                h.update(repr(key).encode())
                h.update(np.ascontiguousarray(fm.values).tobytes())
        return h.hexdigest()

    def save(self, path) -> Path:
        root = Path(path)
        for (mode, k, j) in self.keys():
            (root / mode).mkdir(parents=True, exist_ok=True)
            for kind, fm in zip(FILL_KINDS, self._fills[(mode, k, j)]):
                np.save(root / mode / f"{k}_{j}_{kind}.npy", fm.values)
        return self.write_manifest(root)

    def write_manifest(self, path) -> Path:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        entries = []
        for (mode, k, j) in self.keys():
            cf, _ = self._fills[(mode, k, j)]
            entries.append(
                {
                    "mode": mode,
                    "k": k,
                    "j": j,
                    "users": cf.user_ids.tolist(),
                    "services": cf.service_ids.tolist(),
                }
            )
        manifest = {
            "format": STORE_FORMAT,
            "forest_hash": self.forest_hash,
            "uicl": self.uicl.fingerprint(),
            "sicl": self.sicl.fingerprint(),
            "meta": self.meta,
            "clusters": entries,
        }
        (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))
        return root

    @classmethod
    def load(cls, path, uicl: ClusterForest, sicl: ClusterForest) -> "PreprocessedStore":
        root = Path(path)
        manifest = json.loads((root / "manifest.json").read_text())
        if manifest.get("format") != STORE_FORMAT:
            raise DataError(f"unsupported store format {manifest.get('format')!r}", root)
        if manifest["forest_hash"] != forest_pair_hash(uicl, sicl):
            raise StaleModelError("store was built from a different clustering")
        fills = {}
        for e in manifest["clusters"]:
            users = np.asarray(e["users"], dtype=np.intp)
            services = np.asarray(e["services"], dtype=np.intp)
            pair = tuple(
                FilledMatrix(np.load(root / e["mode"] / f"{e['k']}_{e['j']}_{kind}.npy"), users, services)
                for kind in FILL_KINDS
            )
            fills[(e["mode"], e["k"], e["j"])] = pair
        return cls(uicl, sicl, fills, manifest.get("meta"))


def fill_cluster(sub: np.ndarray, reference: np.ndarray, users, services, mf_params: MfParams, cf_k: int = 10):
    """CF and MF fills of one cluster sub-matrix."""
    if not np.any(sub != 0):
        filled = _mean_fill(sub, reference, users, services)
        return filled, filled.copy()
    return cf_fill(sub, cf_k), _mf_fill(sub, mf_params)


def preprocess_all(
    matrix: np.ndarray,
    uicl: ClusterForest,
    sicl: ClusterForest,
    mf_params: MfParams = MfParams(),
    cf_k: int = 10,
    out_dir=None,
) -> PreprocessedStore:
    """Fill every multi-level cluster of both forests.

    With ``out_dir`` the store is persisted there; cluster files from an
    interrupted build over the same forests are reused.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    fhash = forest_pair_hash(uicl, sicl)
    root = Path(out_dir) if out_dir is not None else None
    reuse = False
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        marker = root / "build.json"
        if marker.exists():
            reuse = json.loads(marker.read_text()).get("forest_hash") == fhash
        marker.write_text(json.dumps({"forest_hash": fhash, "mf": asdict(mf_params), "cf_k": cf_k}))
    fills = {}
    for forest in (uicl, sicl):
        for k, j in forest.multilevel():
            users, services = forest.members(k, j)
            paths = None
            if root is not None:
                (root / forest.mode).mkdir(exist_ok=True)
                paths = [root / forest.mode / f"{k}_{j}_{kind}.npy" for kind in FILL_KINDS]
            if reuse and all(p.exists() for p in paths):
                cf, mf = (np.load(p) for p in paths)
            else:
                sub = matrix[np.ix_(users, services)]
                cf, mf = fill_cluster(sub, matrix, users, services, mf_params, cf_k)
                if paths is not None:
                    for p, arr in zip(paths, (cf, mf)):
                        np.save(p, arr)
            fills[(forest.mode, k, j)] = (
                FilledMatrix(cf, users, services),
                FilledMatrix(mf, users, services),
            )
    store = PreprocessedStore(uicl, sicl, fills, {"mf": asdict(mf_params), "cf_k": cf_k})
    if root is not None:
        store.write_manifest(root)
    return store
