"""Distance and similarity primitives plus tau-derived clustering thresholds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class ThresholdSet:
    """Thresholds for one clustering invocation, all derived from ``tau``.

    ``t_context`` is a distance in km (``inf`` when no context is available),
    ``t_similarity`` a cosine value and ``n_min`` the minimum cluster size.
    """

    t_context: float
    t_similarity: float
    n_min: int
    tau: float

    def __post_init__(self):
        if not (-1.0 <= self.t_similarity <= 1.0):
            raise ConfigError(f"t_similarity must lie in [-1, 1], got {self.t_similarity}")
        if not (self.t_context >= 0):
            raise ConfigError(f"t_context must be >= 0, got {self.t_context}")
        if self.n_min < 1:
            raise ConfigError(f"n_min must be >= 1, got {self.n_min}")
        _check_tau(self.tau)

    def acceptance_size(self, candidate_size: int) -> int:
        return context_sensitive_threshold(self.n_min, self.tau, candidate_size)


def _check_tau(tau):
    if not (0.0 <= tau < 1.0):
        raise ConfigError(f"tau must lie in [0, 1), got {tau}")


def haversine(a, b) -> float:
    """Great-circle distance in km between two (latitude, longitude) pairs."""
    return float(haversine_array(a[0], a[1], b[0], b[1]))


def haversine_array(lat1, lon1, lat2, lon2):
    """Vectorised haversine distance in km; arguments broadcast."""
    p1, l1, p2, l2 = (np.radians(np.asarray(x, dtype=np.float64)) for x in (lat1, lon1, lat2, lon2))
    h = np.sin((p2 - p1) / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin((l2 - l1) / 2.0) ** 2
    h = np.clip(h, 0.0, 1.0)
    return 2.0 * EARTH_RADIUS_KM * np.arctan2(np.sqrt(h), np.sqrt(1.0 - h))


def haversine_matrix(contexts: np.ndarray, other: np.ndarray | None = None) -> np.ndarray:
    """All-pairs distances between rows of ``contexts`` (and ``other``)."""
    a = np.asarray(contexts, dtype=np.float64)
    b = a if other is None else np.asarray(other, dtype=np.float64)
    return haversine_array(a[:, None, 0], a[:, None, 1], b[None, :, 0], b[None, :, 1])


def cosine_sim(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DataError(f"vector lengths differ: {x.shape} vs {y.shape}")
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


def cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    """Cosine similarity between all rows; rows with zero norm score 0."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = v / safe[:, None]
    sim = unit @ unit.T
    zero = norms == 0
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    return np.clip(sim, -1.0, 1.0, out=sim)


def cosine_to(target, vectors: np.ndarray) -> np.ndarray:
    """Cosine similarity of ``target`` with every row of ``vectors``; zero norms score 0."""
    t = np.asarray(target, dtype=np.float64)
    v = np.asarray(vectors, dtype=np.float64)
    denom = np.linalg.norm(v, axis=1) * np.linalg.norm(t)
    safe = np.where(denom > 0, denom, 1.0)
    return np.where(denom > 0, np.clip((v @ t) / safe, -1.0, 1.0), 0.0)


def upper_pairs(square: np.ndarray) -> np.ndarray:
    """Flatten the strict upper triangle, i.e. one value per unordered pair."""
    n = square.shape[0]
    # row slices avoid the two index arrays of triu_indices
    out = np.empty(n * (n - 1) // 2, dtype=square.dtype)
    pos = 0
    for i in range(n - 1):
        row = square[i, i + 1 :]
        out[pos : pos + row.size] = row
        pos += row.size
    return out


def ranked_value(values, tau: float, descending: bool = False, overwrite: bool = False) -> float:
    """Element at 1-based rank ``floor(tau * L)``, clamped to ``[1, L]``.

    The list is sorted ascending, or descending when ``descending`` is set.
    With ``overwrite`` a float64 array argument is reordered in place.
    """
    _check_tau(tau)
    vals = np.asarray(values, dtype=np.float64).ravel() if overwrite else np.array(values, dtype=np.float64).ravel()
    L = vals.size
    if L == 0:
        raise DataError("cannot rank an empty list")
    rank = min(max(int(math.floor(tau * L)), 1), L)
    k = rank - 1 if not descending else L - rank
    vals.partition(k)
    return float(vals[k])


def derive_context_threshold(contexts, tau: float, distances: np.ndarray | None = None) -> float:
    """Distance threshold from the ascending list of all-pairs haversine distances.

    ``distances`` may carry a precomputed square distance matrix.
    """
    ctx = np.asarray(contexts, dtype=np.float64)
    if ctx.shape[0] < 2:
        raise DataError("need at least 2 contexts to derive a distance threshold")
    d = haversine_matrix(ctx) if distances is None else distances
    return ranked_value(upper_pairs(d), tau, descending=False, overwrite=True)


def derive_similarity_threshold(vectors, tau: float, similarities: np.ndarray | None = None) -> float:
    """Cosine threshold from the descending list of all-pairs similarities."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.shape[0] < 2:
        raise DataError("need at least 2 vectors to derive a similarity threshold")
    s = cosine_matrix(v) if similarities is None else similarities
    return ranked_value(upper_pairs(s), tau, descending=True, overwrite=True)


def context_sensitive_threshold(n_min: int, tau: float, candidate_size: int) -> int:
    """Minimum size of an accepted cluster: ``ceil(max(n_min, tau * candidate))``."""
    if n_min < 1:
        raise ConfigError(f"n_min must be >= 1, got {n_min}")
    return int(math.ceil(max(n_min, tau * candidate_size)))
