"""Two-level user/service clustering (UICL and SICL forests).

A first-level partition groups one entity kind (users for UICL, services for
SICL); every first-level cluster is then partitioned along the other axis
using only the rows/columns of that cluster. Each resulting multi-level
cluster owns one sub-matrix, and the sub-matrices tile the QoS matrix.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import matrix_hash
from .errors import ColdStartError, DataError
from .metrics import (
    ThresholdSet,
    cosine_matrix,
    haversine_array,
    haversine_matrix,
    ranked_value,
    upper_pairs,
)

log = logging.getLogger(__name__)

FOREST_FORMAT = "fes-forest/1"
UICL = "UICL"
SICL = "SICL"


@dataclass(frozen=True)
class Cluster:
    member_ids: Tuple[int, ...]
    level: str
    mode: str

    def __post_init__(self):
        if not self.member_ids:
            raise DataError("cluster must not be empty")
        if len(set(self.member_ids)) != len(self.member_ids):
            raise DataError("cluster member ids must be unique")

    def __len__(self):
        return len(self.member_ids)

    def __contains__(self, item):
        return item in self.member_ids


@dataclass
class Partition:
    """Result of clustering one entity axis: cluster member arrays and bookkeeping."""

    clusters: List[np.ndarray]
    thresholds: Optional[ThresholdSet]
    n_seeded: int = 0
    fallback: bool = False

    def __len__(self):
        return len(self.clusters)

    def labels(self, n: int) -> np.ndarray:
        out = np.full(n, -1, dtype=np.intp)
        for k, members in enumerate(self.clusters):
            out[members] = k
        return out


def derive_thresholds(
    vectors: np.ndarray,
    contexts: Optional[np.ndarray],
    tau: float,
    n_min: int,
    similarities: Optional[np.ndarray] = None,
    distances: Optional[np.ndarray] = None,
) -> ThresholdSet:
    """Derive distance and similarity thresholds for the rows of ``vectors``."""
    n = vectors.shape[0]
    if n < 2:
        return ThresholdSet(0.0, 1.0, n_min, tau)
    sim = cosine_matrix(vectors) if similarities is None else similarities
    t_s = ranked_value(upper_pairs(sim), tau, descending=True, overwrite=True)
    if contexts is None:
        t_c = float("inf")
    else:
        dist = haversine_matrix(contexts) if distances is None else distances
        t_c = ranked_value(upper_pairs(dist), tau, descending=False, overwrite=True)
    return ThresholdSet(t_c, t_s, n_min, tau)


def _grow(seed: int, adjacency: np.ndarray, eligible: np.ndarray) -> np.ndarray:
    # transitive closure of the seed over eligible entities
    members = np.zeros(adjacency.shape[0], dtype=bool)
    members[seed] = True
    frontier = np.array([seed])
    while frontier.size:
        reach = adjacency[frontier].any(axis=0)
        reach &= eligible
        reach &= ~members
        frontier = np.flatnonzero(reach)
        members |= reach
    return members


def nearest_cluster(point, clusters: Sequence[np.ndarray], contexts: np.ndarray) -> int:
    """Cluster holding the member at minimum haversine distance; ties go to the lowest id."""
    best, best_d = 0, np.inf
    for k, members in enumerate(clusters):
        d = haversine_array(point[0], point[1], contexts[members, 0], contexts[members, 1]).min()
        if d < best_d:
            best, best_d = k, d
    return best


def most_similar_cluster(similarity_row: np.ndarray, clusters: Sequence[np.ndarray]) -> int:
    """Cluster maximising the max-over-members similarity; ties go to the lowest id."""
    best, best_s = 0, 0.0
    for k, members in enumerate(clusters):
        s = similarity_row[members].max()
        if best_s < s:
            best, best_s = k, s
    return best


def assign_residuals(
    clusters: List[np.ndarray],
    leftover: Sequence[int],
    similarities: np.ndarray,
    contexts: Optional[np.ndarray] = None,
    has_data: Optional[np.ndarray] = None,
) -> List[np.ndarray]:
    """Attach each leftover entity to an existing cluster, in ascending id order.

    Entities with QoS data join the cluster with the most similar member.
    Entities without any data (cold start) join the cluster with the nearest
    member when contexts are available. Clusters grow as entities join, so a
    later leftover can attach through an earlier one.
    """
    if not clusters:
        raise DataError("residual assignment needs at least one cluster")
    grown = [list(c) for c in clusters]
    for u in sorted(int(x) for x in leftover):
        members = [np.asarray(g, dtype=np.intp) for g in grown]
        if contexts is not None and has_data is not None and not has_data[u]:
            k = nearest_cluster(contexts[u], members, contexts)
        else:
            k = most_similar_cluster(similarities[u], members)
        grown[k].append(u)
    return [np.sort(np.asarray(g, dtype=np.intp)) for g in grown]


def cluster_entities(
    vectors: np.ndarray,
    contexts: Optional[np.ndarray],
    thresholds: ThresholdSet,
    similarities: Optional[np.ndarray] = None,
    distances: Optional[np.ndarray] = None,
) -> Partition:
    """Partition the rows of ``vectors``.

    Seeds are tried in ascending id order. A seed grows a context set
    (closure under distance <= ``t_context``) and a similarity set (closure
    under cosine >= ``t_similarity``); their intersection becomes a cluster if
    it is large enough. Without contexts the similarity set is the candidate.
    """
    n = vectors.shape[0]
    if n <= 1:
        return Partition([np.arange(n, dtype=np.intp)], thresholds, fallback=True)
    sim = cosine_matrix(vectors) if similarities is None else similarities
    has_data = np.any(vectors != 0, axis=1)
    # entities without data carry no behavioural evidence
    sim_adj = (sim >= thresholds.t_similarity) & has_data[:, None] & has_data[None, :]
    ctx_adj = None
    if contexts is not None:
        dist = haversine_matrix(contexts) if distances is None else distances
        ctx_adj = dist <= thresholds.t_context

    assigned = np.zeros(n, dtype=bool)
    residual = np.zeros(n, dtype=bool)
    clusters: List[np.ndarray] = []
    for i in range(n):
        if assigned[i] or residual[i]:
            continue
        if n - np.count_nonzero(assigned | residual) <= thresholds.n_min:
            break
        eligible = ~assigned
        sim_set = _grow(i, sim_adj, eligible)
        if ctx_adj is not None:
            candidate = _grow(i, ctx_adj, eligible)
            inter = candidate & sim_set
        else:
            candidate = sim_set
            inter = sim_set
        if np.count_nonzero(inter) >= thresholds.acceptance_size(int(np.count_nonzero(candidate))):
            clusters.append(np.flatnonzero(inter))
            assigned |= inter
        else:
            residual[i] = True

    n_seeded = len(clusters)
    if not clusters:
        return Partition([np.arange(n, dtype=np.intp)], thresholds, fallback=True)
    leftover = np.flatnonzero(~assigned)
    if leftover.size:
        clusters = assign_residuals(clusters, leftover, sim, contexts, has_data)
    return Partition(clusters, thresholds, n_seeded=n_seeded)


def cluster_users(matrix, contexts, thresholds: ThresholdSet, **cached) -> Partition:
    return cluster_entities(np.asarray(matrix), contexts, thresholds, **cached)


def cluster_services_within(user_cluster, matrix, contexts, thresholds: ThresholdSet, **cached) -> Partition:
    """Partition services using only the QoS rows of ``user_cluster``."""
    ids = user_cluster.member_ids if isinstance(user_cluster, Cluster) else user_cluster
    rows = np.asarray(matrix)[np.asarray(ids, dtype=np.intp)]
    return cluster_entities(rows.T, contexts, thresholds, **cached)


# ---------------------------------------------------------------------------
# Forest


@dataclass
class ClusterForest:
    """A two-level clustering of one mode with a complete pair index.

    ``first_level`` holds ids along the first axis (users for UICL, services
    for SICL); ``second_level[k]`` partitions the other axis within
    first-level cluster ``k``.
    """

    mode: str
    shape: Tuple[int, int]
    first_level: List[np.ndarray]
    second_level: List[List[np.ndarray]]
    tau: float
    n_min: int
    source_hash: str
    first_thresholds: Optional[ThresholdSet] = None
    second_thresholds: List[Optional[ThresholdSet]] = field(default_factory=list)
    first_contexts: Optional[np.ndarray] = None
    second_contexts: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mode not in (UICL, SICL):
            raise DataError(f"unknown forest mode {self.mode!r}")
        self.first_level = [np.asarray(c, dtype=np.intp) for c in self.first_level]
        self.second_level = [[np.asarray(c, dtype=np.intp) for c in cs] for cs in self.second_level]
        n_first, n_second = self._axis_sizes()
        self._first_of = np.full(n_first, -1, dtype=np.intp)
        for k, members in enumerate(self.first_level):
            self._first_of[members] = k
        self._second_of = np.full((len(self.first_level), n_second), -1, dtype=np.intp)
        for k, parts in enumerate(self.second_level):
            for j, members in enumerate(parts):
                self._second_of[k, members] = j
        self._fingerprint = None

    def _axis_sizes(self):
        n_users, n_services = self.shape
        return (n_users, n_services) if self.mode == UICL else (n_services, n_users)

    @property
    def has_context(self) -> bool:
        return self.first_contexts is not None

    def lookup(self, user: int, service: int) -> Tuple[int, int]:
        """Return ``(first-level id, second-level id)`` for a user-service pair."""
        first, second = (user, service) if self.mode == UICL else (service, user)
        k = int(self._first_of[first])
        return k, int(self._second_of[k, second])

    def members(self, k: int, j: int) -> Tuple[np.ndarray, np.ndarray]:
        """User ids and service ids of multi-level cluster ``(k, j)``."""
        a, b = self.first_level[k], self.second_level[k][j]
        return (a, b) if self.mode == UICL else (b, a)

    def multilevel(self) -> Iterator[Tuple[int, int]]:
        for k, parts in enumerate(self.second_level):
            for j in range(len(parts)):
                yield k, j

    def n_multilevel(self) -> int:
        return sum(len(p) for p in self.second_level)

    def clusters(self) -> List[Cluster]:
        return [Cluster(tuple(int(x) for x in c), "first", self.mode) for c in self.first_level]

    def second_clusters(self, k: int) -> List[Cluster]:
        return [Cluster(tuple(int(x) for x in c), "second", self.mode) for c in self.second_level[k]]

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        def th(t):
            if t is None:
                return None
            tc = None if not np.isfinite(t.t_context) else t.t_context
            return {"t_context": tc, "t_similarity": t.t_similarity, "n_min": t.n_min, "tau": t.tau}

        def ctx(c):
            return None if c is None else np.asarray(c).tolist()

        return {
            "format": FOREST_FORMAT,
            "mode": self.mode,
            "shape": list(self.shape),
            "tau": self.tau,
            "n_min": self.n_min,
            "source_hash": self.source_hash,
            "first_level": [c.tolist() for c in self.first_level],
            "second_level": [[c.tolist() for c in cs] for cs in self.second_level],
            "first_thresholds": th(self.first_thresholds),
            "second_thresholds": [th(t) for t in self.second_thresholds],
            "first_contexts": ctx(self.first_contexts),
            "second_contexts": ctx(self.second_contexts),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterForest":
        if d.get("format") != FOREST_FORMAT:
            raise DataError(f"unsupported forest format {d.get('format')!r}")

        def th(t):
            if t is None:
                return None
            tc = float("inf") if t["t_context"] is None else t["t_context"]
            return ThresholdSet(tc, t["t_similarity"], t["n_min"], t["tau"])

        def ctx(c):
            return None if c is None else np.asarray(c, dtype=np.float64)

        return cls(
            mode=d["mode"],
            shape=tuple(d["shape"]),
            first_level=d["first_level"],
            second_level=d["second_level"],
            tau=d["tau"],
            n_min=d["n_min"],
            source_hash=d["source_hash"],
            first_thresholds=th(d["first_thresholds"]),
            second_thresholds=[th(t) for t in d["second_thresholds"]],
            first_contexts=ctx(d["first_contexts"]),
            second_contexts=ctx(d["second_contexts"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        if self._fingerprint is None:
            self._fingerprint = hashlib.sha256(self.to_json().encode()).hexdigest()
        return self._fingerprint

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ClusterForest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def forest_pair_hash(uicl: ClusterForest, sicl: ClusterForest) -> str:
    """Digest binding a trained model to the clustering it was built on."""
    return hashlib.sha256((uicl.fingerprint() + sicl.fingerprint()).encode()).hexdigest()


def assign_new_entity(entity_context, forest: ClusterForest) -> int:
    """First-level cluster for an entity without QoS history, by nearest member."""
    if not forest.has_context:
        raise ColdStartError("cold-start assignment unavailable without context")
    return nearest_cluster(entity_context, forest.first_level, forest.first_contexts)


def _build_one(
    mode: str,
    matrix: np.ndarray,
    first_ctx: Optional[np.ndarray],
    second_ctx: Optional[np.ndarray],
    tau: float,
    n_min: int,
    source_hash: str,
) -> ClusterForest:
    # rows of `oriented` are first-level entities
    oriented = matrix if mode == UICL else matrix.T
    first_dist = None if first_ctx is None else haversine_matrix(first_ctx)
    second_dist = None if second_ctx is None else haversine_matrix(second_ctx)

    first_sim = cosine_matrix(oriented)
    th1 = derive_thresholds(oriented, first_ctx, tau, n_min, first_sim, first_dist)
    first = cluster_entities(oriented, first_ctx, th1, first_sim, first_dist)

    second_level, second_th = [], []
    for members in first.clusters:
        vectors = oriented[members].T
        sim = cosine_matrix(vectors)
        th2 = derive_thresholds(vectors, second_ctx, tau, n_min, sim, second_dist)
        part = cluster_entities(vectors, second_ctx, th2, sim, second_dist)
        second_level.append(part.clusters)
        second_th.append(th2)
    log.debug(
        "%s: %d first-level clusters, %d multi-level clusters",
        mode,
        len(first.clusters),
        sum(len(s) for s in second_level),
    )
    return ClusterForest(
        mode=mode,
        shape=matrix.shape,
        first_level=first.clusters,
        second_level=second_level,
        tau=tau,
        n_min=n_min,
        source_hash=source_hash,
        first_thresholds=th1,
        second_thresholds=second_th,
        first_contexts=first_ctx,
        second_contexts=second_ctx,
    )


def build_forest(
    matrix: np.ndarray,
    user_contexts: Optional[np.ndarray],
    service_contexts: Optional[np.ndarray],
    tau: float = 0.5,
    n_min: int = 100,
) -> Tuple[ClusterForest, ClusterForest]:
    """Build the UICL (users then services) and SICL (services then users) forests.

    Context-aware growth is used only when both context arrays are given.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.size == 0:
        raise DataError("cannot cluster an empty matrix")
    if user_contexts is None or service_contexts is None:
        user_contexts = service_contexts = None
    src = matrix_hash(matrix)
    uicl = _build_one(UICL, matrix, user_contexts, service_contexts, tau, n_min, src)
    sicl = _build_one(SICL, matrix, service_contexts, user_contexts, tau, n_min, src)
    return uicl, sicl
