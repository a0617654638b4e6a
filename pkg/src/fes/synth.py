"""Synthetic QoS datasets shaped like the WS-DREAM response-time logs.

Users and services are scattered around a handful of regions. A response
time is the product of a per-service base cost, a per-user factor, a
region-pair link factor and a distance term, perturbed by log-normal noise.
This gives location-correlated, low-rank-ish matrices on which clustering
and imputation behave as they do on the real logs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import DatasetBundle, QosKind
from .errors import ConfigError
from .metrics import haversine_matrix

# (latitude, longitude) of region centres: North America, Europe, East Asia,
# South America, Oceania, South Asia
REGIONS = np.array(
    [
        [40.0, -95.0],
        [50.0, 10.0],
        [35.0, 120.0],
        [-15.0, -55.0],
        [-30.0, 145.0],
        [20.0, 78.0],
    ]
)


@dataclass(frozen=True)
class SynthSpec:
    n_users: int = 150
    n_services: int = 1000
    n_regions: int = 4
    missing: float = 0.06
    noise: float = 0.15
    spread_deg: float = 4.0
    seed: int = 0
    qos_kind: str = "rt"

    def __post_init__(self):
        if self.n_users < 1 or self.n_services < 1:
            raise ConfigError("synthetic matrix needs at least one user and one service")
        if not 1 <= self.n_regions <= len(REGIONS):
            raise ConfigError(f"n_regions must lie in [1, {len(REGIONS)}]")
        if not 0.0 <= self.missing < 1.0:
            raise ConfigError("missing fraction must lie in [0, 1)")


def _place(rng, n, n_regions, spread):
    region = rng.integers(0, n_regions, size=n)
    ctx = REGIONS[region] + rng.normal(0.0, spread, size=(n, 2))
    ctx[:, 0] = np.clip(ctx[:, 0], -89.0, 89.0)
    ctx[:, 1] = (ctx[:, 1] + 180.0) % 360.0 - 180.0
    return region, ctx


def generate(spec: SynthSpec = SynthSpec()) -> DatasetBundle:
    """Draw one dataset. Unobserved cells are 0 in the returned matrix."""
    rng = np.random.default_rng(spec.seed)
    u_region, u_ctx = _place(rng, spec.n_users, spec.n_regions, spec.spread_deg)
    s_region, s_ctx = _place(rng, spec.n_services, spec.n_regions, spec.spread_deg)

    service_base = rng.lognormal(mean=np.log(0.4), sigma=0.6, size=spec.n_services)
    user_factor = rng.lognormal(mean=0.0, sigma=0.35, size=spec.n_users)
    link = rng.lognormal(mean=0.0, sigma=0.5, size=(spec.n_regions, spec.n_regions))
    np.fill_diagonal(link, rng.uniform(0.3, 0.6, size=spec.n_regions))
    # distance adds latency on top of the multiplicative structure
    dist = np.zeros((spec.n_users, spec.n_services))
    for r in range(spec.n_regions):
        rows = u_region == r
        if np.any(rows):
            dist[rows] = haversine_matrix(u_ctx[rows], s_ctx)
    rt = (
        service_base[None, :]
        * user_factor[:, None]
        * link[u_region][:, s_region]
        * (1.0 + dist / 5000.0)
        * rng.lognormal(0.0, spec.noise, size=(spec.n_users, spec.n_services))
    )
    rt = np.clip(rt, 0.001, 20.0)
    if spec.qos_kind == "tp":
        values = np.clip(30.0 / rt, 0.1, 1000.0)
    else:
        values = rt
    values[rng.random(values.shape) < spec.missing] = 0.0
    return DatasetBundle(values, u_ctx, s_ctx, QosKind.parse(spec.qos_kind))
