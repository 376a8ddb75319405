"""Temporal QoS records: parsing, validation, density splits and per-slice views.

Records are ``(user, service, slice, value)`` quadruples, one per line::

    # optional comment
    0 25 1 0.299

A canonical file written by :func:`serialize` starts with a ``#`` header that
declares the dimensions, so re-parsing it keeps users or services that have no
record.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, NamedTuple

import numpy as np
from scipy import sparse


class DatasetError(ValueError):
    """Base class for dataset problems."""


class ParseError(DatasetError):
    """A line could not be read as four numeric columns."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ValidationError(DatasetError):
    """Well-formed input that violates a record invariant."""


class QoSRecord(NamedTuple):
    user: int
    service: int
    slice: int
    value: float


COLUMNS = ("user", "service", "slice", "value")
_HEADER_RE = re.compile(r"#\s*gacl-dataset\s+(.*)")


@dataclass(frozen=True)
class Schema:
    """How to read a records file.

    ``delimiter=None`` splits on any whitespace. ``columns`` gives the role of
    each of the four columns in file order. Dimension overrides cap the valid
    index ranges instead of inferring them from the data.
    """

    delimiter: str | None = None
    columns: tuple[str, str, str, str] = COLUMNS
    n_users: int | None = None
    n_services: int | None = None
    n_slices: int | None = None

    def __post_init__(self):
        if sorted(self.columns) != sorted(COLUMNS):
            raise ValueError(f"columns must be a permutation of {COLUMNS}, got {self.columns}")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class TemporalQoSDataset:
    n_users: int
    n_services: int
    n_slices: int
    users: np.ndarray
    services: np.ndarray
    slices: np.ndarray
    values: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        for attr, dtype in (("users", np.int64), ("services", np.int64), ("slices", np.int64), ("values", np.float64)):
            object.__setattr__(self, attr, _frozen(np.asarray(getattr(self, attr), dtype=dtype)))

    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def value_min(self) -> float:
        return float(self.values.min())

    @property
    def value_max(self) -> float:
        return float(self.values.max())

    @property
    def density(self) -> float:
        return len(self) / (self.n_users * self.n_services * self.n_slices)

    @property
    def sparsity(self) -> float:
        return 1.0 - self.density

    def record(self, i: int) -> QoSRecord:
        return QoSRecord(int(self.users[i]), int(self.services[i]), int(self.slices[i]), float(self.values[i]))

    def records(self) -> list[QoSRecord]:
        return [self.record(i) for i in range(len(self))]

    def triples(self) -> np.ndarray:
        return np.stack([self.users, self.services, self.slices], axis=1)

    def subset(self, rows: np.ndarray) -> "TemporalQoSDataset":
        return TemporalQoSDataset(self.n_users, self.n_services, self.n_slices,
                                  self.users[rows], self.services[rows], self.slices[rows],
                                  self.values[rows], name=self.name)


def _parse_int(tok: str, what: str, line: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"{what} {tok!r} is not an integer", line) from None


def parse_records(source: IO | bytes | str | Path, schema: Schema | None = None,
                  name: str | None = None) -> TemporalQoSDataset:
    """Read a records stream into a validated dataset.

    ``source`` may be a binary or text stream, raw bytes, or a path.
    """
    schema = schema or Schema()
    if isinstance(source, (str, Path)):
        path = Path(source)
        name = name or path.stem
        with open(path, "rb") as fh:
            return parse_records(fh, schema, name=name)
    if isinstance(source, bytes):
        source = io.BytesIO(source)

    declared: dict[str, int] = {}
    users, services, slices, values = [], [], [], []
    col = {role: i for i, role in enumerate(schema.columns)}
    seen_data = False
    for lineno, raw in enumerate(source, start=1):
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        text = text.strip()
        if not text:
            continue
        if text.startswith("#"):
            m = _HEADER_RE.match(text)
            if m:
                for item in m.group(1).split():
                    key, _, val = item.partition("=")
                    if key in ("n_users", "n_services", "n_slices"):
                        declared[key] = _parse_int(val, key, lineno)
            continue
        toks = text.split(schema.delimiter) if schema.delimiter else text.split()
        toks = [t.strip() for t in toks]
        if len(toks) != 4:
            raise ParseError(f"expected 4 columns, found {len(toks)}", lineno)
        if not seen_data and _is_header(toks):
            seen_data = True
            continue
        seen_data = True
        u = _parse_int(toks[col["user"]], "user id", lineno)
        s = _parse_int(toks[col["service"]], "service id", lineno)
        t = _parse_int(toks[col["slice"]], "time slice", lineno)
        try:
            v = float(toks[col["value"]])
        except ValueError:
            raise ParseError(f"value {toks[col['value']]!r} is not a number", lineno) from None
        if min(u, s, t) < 0:
            raise ValidationError(f"line {lineno}: negative index in ({u}, {s}, {t})")
        if not math.isfinite(v) or v < 0:
            raise ValidationError(f"line {lineno}: QoS value must be finite and non-negative, got {v}")
        users.append(u)
        services.append(s)
        slices.append(t)
        values.append(v)

    if not values:
        raise ValidationError("no records")

    u = np.asarray(users, dtype=np.int64)
    s = np.asarray(services, dtype=np.int64)
    t = np.asarray(slices, dtype=np.int64)
    dims = {}
    for key, arr in (("n_users", u), ("n_services", s), ("n_slices", t)):
        override = getattr(schema, key) or declared.get(key)
        inferred = int(arr.max()) + 1
        if override is not None:
            if inferred > override:
                bad = int(np.argmax(arr >= override))
                raise ValidationError(
                    f"record {bad + 1}: index {int(arr[bad])} exceeds declared {key}={override}")
            dims[key] = int(override)
        else:
            dims[key] = inferred

    ds = TemporalQoSDataset(dims["n_users"], dims["n_services"], dims["n_slices"], u, s, t,
                            np.asarray(values), name=name or "dataset")
    _reject_duplicates(ds)
    return ds


def _is_header(toks) -> bool:
    for tok in toks:
        try:
            float(tok)
        except ValueError:
            continue
        return False
    return True


def _reject_duplicates(ds: TemporalQoSDataset) -> None:
    key = (ds.slices * ds.n_users + ds.users) * ds.n_services + ds.services
    order = np.argsort(key, kind="stable")
    dup = np.nonzero(np.diff(key[order]) == 0)[0]
    if dup.size:
        i = int(order[dup[0] + 1])
        raise ValidationError(
            f"duplicate record for (user={ds.users[i]}, service={ds.services[i]}, slice={ds.slices[i]})")


def canonical_order(ds: TemporalQoSDataset) -> np.ndarray:
    return np.lexsort((ds.services, ds.users, ds.slices))


def serialize(ds: TemporalQoSDataset) -> str:
    """Canonical text form: dimension header, then records sorted by (slice, user, service)."""
    lines = [f"# gacl-dataset n_users={ds.n_users} n_services={ds.n_services} n_slices={ds.n_slices}"]
    for i in canonical_order(ds):
        lines.append(f"{ds.users[i]} {ds.services[i]} {ds.slices[i]} {float(ds.values[i])!r}")
    return "\n".join(lines) + "\n"


def content_hash(ds: TemporalQoSDataset) -> str:
    return hashlib.sha256(serialize(ds).encode("utf-8")).hexdigest()


# -- density split ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SplitDataset:
    parent: TemporalQoSDataset
    train_rows: np.ndarray
    test_rows: np.ndarray
    density: float
    seed: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "train_rows", _frozen(np.asarray(self.train_rows, dtype=np.int64)))
        object.__setattr__(self, "test_rows", _frozen(np.asarray(self.test_rows, dtype=np.int64)))

    @property
    def train(self) -> TemporalQoSDataset:
        if "train" not in self._cache:
            self._cache["train"] = self.parent.subset(self.train_rows)
        return self._cache["train"]

    @property
    def test(self) -> TemporalQoSDataset:
        if "test" not in self._cache:
            self._cache["test"] = self.parent.subset(self.test_rows)
        return self._cache["test"]

    @property
    def n_users(self) -> int:
        return self.parent.n_users

    @property
    def n_services(self) -> int:
        return self.parent.n_services

    @property
    def n_slices(self) -> int:
        return self.parent.n_slices

    def manifest(self) -> dict:
        """Reproducibility record: seed, density, counts and a hash of both parts."""
        h = hashlib.sha256()
        h.update(serialize(self.train).encode("utf-8"))
        h.update(b"--test--\n")
        h.update(serialize(self.test).encode("utf-8"))
        return {
            "dataset": self.parent.name,
            "density": self.density,
            "seed": self.seed,
            "n_records": len(self.parent),
            "train_count": int(self.train_rows.size),
            "test_count": int(self.test_rows.size),
            "content_hash": h.hexdigest(),
        }

    def manifest_json(self) -> str:
        return json.dumps(self.manifest(), sort_keys=True, indent=2) + "\n"


def train_size(n_records: int, density: float) -> int:
    """round(density * N), halves rounded up."""
    return int(math.floor(density * n_records + 0.5))


def split_by_density(ds: TemporalQoSDataset, density: float, seed: int) -> SplitDataset:
    """Uniform sample without replacement of ``density`` of all records into train."""
    if not 0.0 < density < 1.0:
        raise ValueError(f"density must lie in (0, 1), got {density}")
    k = train_size(len(ds), density)
    if k == 0:
        raise ValueError(f"density {density} leaves the training split empty for {len(ds)} records")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return SplitDataset(ds, np.sort(perm[:k]), np.sort(perm[k:]), float(density), int(seed))


# -- per-slice matrix ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SliceMatrix:
    """Train-split entries of R^t as coordinate arrays."""

    t: int
    shape: tuple[int, int]
    users: np.ndarray
    services: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return int(self.values.size)

    def __contains__(self, key) -> bool:
        u, s = key
        return bool(np.any((self.users == u) & (self.services == s)))

    def get(self, u: int, s: int, default=None):
        hit = np.nonzero((self.users == u) & (self.services == s))[0]
        return float(self.values[hit[0]]) if hit.size else default

    def to_scipy(self) -> sparse.coo_array:
        return sparse.coo_array((self.values, (self.users, self.services)), shape=self.shape)


def slice_matrix(split: SplitDataset, t: int) -> SliceMatrix:
    if not 0 <= t < split.n_slices:
        raise IndexError(f"time slice {t} outside [0, {split.n_slices})")
    tr = split.train
    rows = np.nonzero(tr.slices == t)[0]
    return SliceMatrix(t, (split.n_users, split.n_services), tr.users[rows], tr.services[rows], tr.values[rows])


# -- synthetic data --------------------------------------------------------

def make_synthetic(n_users: int = 5, n_services: int = 8, n_slices: int = 6, rank: int = 2,
                   drift: float = 0.05, noise: float = 0.0, seed: int = 0) -> TemporalQoSDataset:
    """Dense dataset from a planted low-rank model with per-user temporal drift.

    value[u, s, t] = softplus(P_u . Q_s + b_s) * (1 + drift * g_u * t) + noise
    """
    rng = np.random.default_rng(seed)
    P = rng.normal(0.0, 1.0, size=(n_users, rank))
    Q = rng.normal(0.0, 1.0, size=(n_services, rank))
    b = rng.normal(0.0, 0.5, size=n_services)
    g = rng.uniform(-1.0, 1.0, size=n_users)
    base = np.logaddexp(0.0, P @ Q.T + b)
    t = np.arange(n_slices)
    vals = base[:, :, None] * (1.0 + drift * g[:, None, None] * t[None, None, :])
    if noise:
        vals = vals + rng.normal(0.0, noise, size=vals.shape)
    vals = np.clip(vals, 0.0, None)
    uu, ss, tt = np.meshgrid(np.arange(n_users), np.arange(n_services), t, indexing="ij")
    ds = TemporalQoSDataset(n_users, n_services, n_slices, uu.ravel(), ss.ravel(), tt.ravel(),
                            vals.ravel(), name="synthetic")
    return ds.subset(canonical_order(ds))
