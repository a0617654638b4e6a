"""WS-DREAM style QoS logs: loading, splitting, cold-start masks, augmentation.

A QoS matrix is a plain ``float64`` array of shape ``(n_users, n_services)``
in which ``0`` marks a user-service pair that was never invoked. Raw
WS-DREAM files use ``-1`` for the same thing; the loader maps it once.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError

RAW_MISSING = -1.0

MATRIX_FILES = {"rt": "rtMatrix.txt", "tp": "tpMatrix.txt"}
USER_FILE = "userlist.txt"
SERVICE_FILE = "wslist.txt"


class QosKind(str, enum.Enum):
    RT = "rt"
    TP = "tp"

    @classmethod
    def parse(cls, value) -> "QosKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown QoS kind {value!r}; expected 'rt' or 'tp'") from None


class GeoContext(NamedTuple):
    """Location of one user or service, in degrees."""

    latitude: float
    longitude: float

    @classmethod
    def checked(cls, latitude, longitude) -> "GeoContext":
        lat, lon = float(latitude), float(longitude)
        if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
            raise DataError(f"coordinates out of range: ({lat}, {lon})")
        return cls(lat, lon)


def check_contexts(contexts, n: int, what: str = "contexts") -> Optional[np.ndarray]:
    """Validate an ``(n, 2)`` array of (latitude, longitude) rows."""
    if contexts is None:
        return None
    arr = np.asarray(contexts, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DataError(f"{what} must have shape (n, 2), got {arr.shape}")
    if arr.shape[0] != n:
        raise DataError(f"{what} has {arr.shape[0]} records, expected {n}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{what} contain non-finite coordinates")
    if np.any(np.abs(arr[:, 0]) > 90.0) or np.any(np.abs(arr[:, 1]) > 180.0):
        raise DataError(f"{what} contain coordinates out of range")
    return arr


def check_qos_matrix(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"QoS matrix must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("QoS matrix contains non-finite values")
    if np.any(arr < 0):
        raise DataError("QoS matrix contains negative values")
    return arr


def density(matrix: np.ndarray) -> float:
    """Fraction of valid (non-zero) entries."""
    if matrix.size == 0:
        return 0.0
    return float(np.count_nonzero(matrix)) / matrix.size


def matrix_hash(matrix: np.ndarray) -> str:
    """Content digest used to tie persisted artifacts to their source log."""
    arr = np.ascontiguousarray(matrix, dtype=np.float64)
    h = hashlib.sha256()
    h.update(np.asarray(arr.shape, dtype=np.int64).tobytes())
    h.update(arr.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class DatasetBundle:
    matrix: np.ndarray
    user_contexts: Optional[np.ndarray] = None
    service_contexts: Optional[np.ndarray] = None
    qos_kind: QosKind = QosKind.RT

    def __post_init__(self):
        m = check_qos_matrix(self.matrix)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "qos_kind", QosKind.parse(self.qos_kind))
        object.__setattr__(
            self, "user_contexts", check_contexts(self.user_contexts, m.shape[0], "user contexts")
        )
        object.__setattr__(
            self,
            "service_contexts",
            check_contexts(self.service_contexts, m.shape[1], "service contexts"),
        )

    @property
    def n_users(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_services(self) -> int:
        return self.matrix.shape[1]

    @property
    def has_context(self) -> bool:
        """False means the pipeline runs without context-aware clustering."""
        return self.user_contexts is not None and self.service_contexts is not None

    def with_matrix(self, matrix: np.ndarray) -> "DatasetBundle":
        return DatasetBundle(matrix, self.user_contexts, self.service_contexts, self.qos_kind)

    def subset(self, users: Sequence[int], services: Sequence[int]) -> "DatasetBundle":
        users = np.asarray(users, dtype=np.intp)
        services = np.asarray(services, dtype=np.intp)
        uc = None if self.user_contexts is None else self.user_contexts[users]
        sc = None if self.service_contexts is None else self.service_contexts[services]
        return DatasetBundle(self.matrix[np.ix_(users, services)], uc, sc, self.qos_kind)


@dataclass(frozen=True)
class Cells:
    """A set of matrix cells with their values (row-major order is not implied)."""

    users: np.ndarray
    services: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.values)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Cells":
        users, services = np.nonzero(matrix)
        return cls(users, services, matrix[users, services])

    def take(self, idx) -> "Cells":
        idx = np.asarray(idx, dtype=np.intp)
        return Cells(self.users[idx], self.services[idx], self.values[idx])

    def as_set(self) -> set:
        return set(zip(self.users.tolist(), self.services.tolist()))

    def to_matrix(self, shape) -> np.ndarray:
        out = np.zeros(shape)
        out[self.users, self.services] = self.values
        return out


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.train_fraction < 1.0):
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")


# ---------------------------------------------------------------------------
# File IO


def _parse_matrix_file(path: Path) -> np.ndarray:
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            try:
                row = [float(t) for t in tokens]
            except ValueError:
                bad = next(t for t in tokens if not _is_float(t))
                raise DataError(f"non-numeric token {bad!r}", path, lineno) from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataError(f"row has {len(row)} values, expected {width}", path, lineno)
            for v in row:
                if not math.isfinite(v) or (v < 0 and v != RAW_MISSING):
                    raise DataError(f"invalid QoS value {v!r}", path, lineno)
            rows.append(row)
    if not rows:
        raise DataError("matrix file is empty", path)
    arr = np.asarray(rows, dtype=np.float64)
    arr[arr == RAW_MISSING] = 0.0
    return arr


def _is_float(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def _parse_context_file(path: Path, n: int) -> np.ndarray:
    """Read ``id<TAB>lat<TAB>lon`` records; WS-DREAM headers pick the columns."""
    lat_col, lon_col = 1, 2
    records = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("["):
                header = [h.strip().strip("[]").lower() for h in line.rstrip("\n").split("\t")]
                if "latitude" in header and "longitude" in header:
                    lat_col, lon_col = header.index("latitude"), header.index("longitude")
                continue
            if stripped.startswith("#"):
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) <= max(lat_col, lon_col):
                raise DataError(f"expected at least {max(lat_col, lon_col) + 1} fields", path, lineno)
            try:
                idx = int(fields[0])
                lat = float(fields[lat_col])
                lon = float(fields[lon_col])
            except ValueError:
                raise DataError("non-numeric id or coordinate", path, lineno) from None
            if not (-90 <= lat <= 90 and -180 <= lon <= 180):
                raise DataError(f"coordinates out of range: ({lat}, {lon})", path, lineno)
            if idx in records:
                raise DataError(f"duplicate id {idx}", path, lineno)
            records[idx] = (lat, lon, lineno)
    if len(records) != n or set(records) != set(range(n)):
        last = max((r[2] for r in records.values()), default=None)
        raise DataError(
            f"context ids must cover 0..{n - 1} exactly, found {len(records)} records", path, last
        )
    return np.array([records[i][:2] for i in range(n)], dtype=np.float64)


def load_wsdream(path, qos_kind="rt") -> DatasetBundle:
    """Load a WS-DREAM-1 style directory.

    The directory must hold ``rtMatrix.txt`` or ``tpMatrix.txt`` and may hold
    ``userlist.txt`` and ``wslist.txt``. Without both context files the
    bundle has no context and downstream clustering runs in WoCC mode.
    """
    kind = QosKind.parse(qos_kind)
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    matrix_path = root / MATRIX_FILES[kind.value]
    if not matrix_path.exists():
        raise DataError(f"missing matrix file {matrix_path.name}", root)
    matrix = _parse_matrix_file(matrix_path)
    n, m = matrix.shape
    uc = sc = None
    if (root / USER_FILE).exists() and (root / SERVICE_FILE).exists():
        uc = _parse_context_file(root / USER_FILE, n)
        sc = _parse_context_file(root / SERVICE_FILE, m)
    return DatasetBundle(matrix, uc, sc, kind)


def write_wsdream(bundle: DatasetBundle, path) -> Path:
    """Write a bundle in the layout :func:`load_wsdream` reads (bit-exact)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    raw = np.where(bundle.matrix == 0, RAW_MISSING, bundle.matrix)
    with open(root / MATRIX_FILES[bundle.qos_kind.value], "w") as fh:
        for row in raw:
            fh.write("\t".join(repr(float(v)) for v in row))
            fh.write("\n")
    for name, ctx in ((USER_FILE, bundle.user_contexts), (SERVICE_FILE, bundle.service_contexts)):
        if ctx is None:
            continue
        with open(root / name, "w") as fh:
            fh.write("# id\tlatitude\tlongitude\n")
            for i, (lat, lon) in enumerate(ctx):
                fh.write(f"{i}\t{float(lat)!r}\t{float(lon)!r}\n")
    return root


def load_wsdream_timeslices(path, qos_kind="rt", shape=(142, 4500), n_slices=64):
    """Load WS-DREAM-2 ``user service slice value`` records as independent bundles.

    Each time slice becomes its own context-free bundle.
    """
    kind = QosKind.parse(qos_kind)
    path = Path(path)
    if path.is_dir():
        path = path / f"{kind.value}data.txt"
    mats = np.zeros((n_slices,) + tuple(shape))
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 4:
                raise DataError(f"expected 4 fields, got {len(tokens)}", path, lineno)
            try:
                u, s, t = int(tokens[0]), int(tokens[1]), int(tokens[2])
                v = float(tokens[3])
            except ValueError:
                raise DataError("non-numeric field", path, lineno) from None
            if not (0 <= u < shape[0] and 0 <= s < shape[1] and 0 <= t < n_slices):
                raise DataError(f"index out of range: ({u}, {s}, {t})", path, lineno)
            if v == RAW_MISSING:
                v = 0.0
            elif v < 0 or not math.isfinite(v):
                raise DataError(f"invalid QoS value {v!r}", path, lineno)
            mats[t, u, s] = v
    return [DatasetBundle(mats[t], None, None, kind) for t in range(n_slices)]


def export_triples(matrix: np.ndarray, path) -> None:
    """Write the valid entries as ``user,service,value`` CSV rows."""
    cells = Cells.from_matrix(matrix)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "service", "value"])
        for u, s, v in zip(cells.users.tolist(), cells.services.tolist(), cells.values.tolist()):
            w.writerow([u, s, repr(v)])


def read_triples(path, shape) -> np.ndarray:
    out = np.zeros(shape)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["user", "service", "value"]:
            raise DataError(f"bad triple header {header!r}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            try:
                u, s, v = int(row[0]), int(row[1]), float(row[2])
            except (ValueError, IndexError):
                raise DataError("malformed triple", path, lineno) from None
            if not (0 <= u < shape[0] and 0 <= s < shape[1]) or v < 0:
                raise DataError(f"triple out of range: {row}", path, lineno)
            out[u, s] = v
    return out


# ---------------------------------------------------------------------------
# Splits and masks


def split(data, spec: SplitSpec):
    """Split valid entries into train matrix, validation cells and test cells.

    ``floor(train_fraction * valid)`` entries go to training; the rest are
    divided 1:2 between validation and test by a seeded permutation.
    """
    matrix = data.matrix if isinstance(data, DatasetBundle) else check_qos_matrix(data)
    cells = Cells.from_matrix(matrix)
    n_valid = len(cells)
    n_train = int(math.floor(spec.train_fraction * n_valid))
    if n_valid == 0 or n_train < 1:
        raise DataError(
            f"train fraction {spec.train_fraction} of {n_valid} valid entries leaves no training data"
        )
    perm = np.random.default_rng(spec.seed).permutation(n_valid)
    rest = n_valid - n_train
    n_val = rest // 3
    train_idx = np.sort(perm[:n_train])
    val_idx = np.sort(perm[n_train : n_train + n_val])
    test_idx = np.sort(perm[n_train + n_val :])
    train = np.zeros_like(matrix)
    tc = cells.take(train_idx)
    train[tc.users, tc.services] = tc.values
    return train, cells.take(val_idx), cells.take(test_idx)


def mask_cold_start(matrix: np.ndarray, axis: str, fraction: float, seed: int):
    """Zero ``floor(fraction * n)`` randomly chosen rows (users) or columns (services)."""
    if axis not in ("users", "services"):
        raise ConfigError(f"axis must be 'users' or 'services', got {axis!r}")
    if not (0.0 <= fraction < 1.0):
        raise ConfigError(f"cold-start fraction must lie in [0, 1), got {fraction}")
    n = matrix.shape[0] if axis == "users" else matrix.shape[1]
    count = int(math.floor(fraction * n))
    ids = np.sort(np.random.default_rng(seed).choice(n, size=count, replace=False))
    out = matrix.copy()
    if axis == "users":
        out[ids, :] = 0.0
    else:
        out[:, ids] = 0.0
    return out, ids.tolist()


def augment(
    bundle: DatasetBundle,
    user_factor: int,
    service_factor: int,
    seed: int,
    jitter: float = 0.05,
    context_jitter: float = 0.01,
) -> DatasetBundle:
    """Replicate users and services into a larger, correlated dataset.

    The original block is kept as is. Each replica block multiplies valid
    entries by noise drawn uniformly from ``[1 - jitter, 1 + jitter]`` and
    shifts replica coordinates by at most ``context_jitter`` degrees.
    """
    if user_factor < 1 or service_factor < 1:
        raise ConfigError("augmentation factors must be >= 1")
    rng = np.random.default_rng(seed)
    n, m = bundle.matrix.shape
    base = bundle.matrix
    out = np.empty((n * user_factor, m * service_factor))
    for a in range(user_factor):
        for b in range(service_factor):
            block = base
            if (a, b) != (0, 0) and jitter > 0:
                noise = rng.uniform(1.0 - jitter, 1.0 + jitter, size=base.shape)
                block = base * noise
            out[a * n : (a + 1) * n, b * m : (b + 1) * m] = block

    def _replicate(ctx, factor):
        if ctx is None:
            return None
        parts = [ctx]
        for _ in range(1, factor):
            shift = rng.uniform(-context_jitter, context_jitter, size=ctx.shape) if context_jitter else 0.0
            rep = ctx + shift
            rep[:, 0] = np.clip(rep[:, 0], -90.0, 90.0)
            rep[:, 1] = np.clip(rep[:, 1], -180.0, 180.0)
            parts.append(rep)
        return np.vstack(parts)

    return DatasetBundle(
        out,
        _replicate(bundle.user_contexts, user_factor),
        _replicate(bundle.service_contexts, service_factor),
        bundle.qos_kind,
    )


def describe(bundle: DatasetBundle) -> dict:
    return {
        "qos": bundle.qos_kind.value,
        "n_users": bundle.n_users,
        "n_services": bundle.n_services,
        "valid": int(np.count_nonzero(bundle.matrix)),
        "density": density(bundle.matrix),
        "context": bundle.has_context,
    }
