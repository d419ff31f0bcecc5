"""Dataset container, CSV ingestion, coarsening and holdout splitting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigurationError, EmptyInputError, ValidationError

ROLES = ("covariate", "instrument", "treatment", "outcome", "id", "ignore")
DEFAULT_NAMES = {"instrument": "z", "treatment": "t", "outcome": "y", "id": "id"}


@dataclass(frozen=True)
class CovariateSchema:
    names: tuple[str, ...]
    cardinalities: tuple[int, ...]

    def __post_init__(self):
        if len(self.names) != len(self.cardinalities):
            raise ConfigurationError("schema names and cardinalities differ in length")
        if any(k < 2 for k in self.cardinalities):
            raise ConfigurationError("every covariate needs cardinality >= 2")

    @property
    def p(self) -> int:
        return len(self.names)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Units with categorical covariates, a binary instrument, treatment and outcome.

    Arrays are stored column-wise and frozen after construction, so a
    ``Dataset`` can be shared between workers without copying.
    """

    x: np.ndarray
    z: np.ndarray
    t: np.ndarray
    y: np.ndarray
    schema: CovariateSchema
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.int64)
        if x.ndim != 2:
            raise ValidationError("covariate matrix must be two-dimensional")
        n, p = x.shape
        if p != self.schema.p:
            raise ValidationError(f"expected {self.schema.p} covariates, got {p}")
        z = np.ascontiguousarray(self.z, dtype=np.int64).reshape(-1)
        t = np.ascontiguousarray(self.t, dtype=np.float64).reshape(-1)
        y = np.ascontiguousarray(self.y, dtype=np.float64).reshape(-1)
        ids = np.arange(n, dtype=np.int64) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        for name, arr in (("z", z), ("t", t), ("y", y), ("ids", ids)):
            if arr.shape != (n,):
                raise ValidationError(f"column {name} has length {arr.shape[0]}, expected {n}")
        _check_codes(x, z, t, y, self.schema.cardinalities)
        if len(np.unique(ids)) != n:
            raise ValidationError("unit ids must be unique")
        for name, arr in (("x", x), ("z", z), ("t", t), ("y", y), ("ids", ids)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def subset(self, rows) -> "Dataset":
        """Dataset restricted to the given row positions (schema unchanged)."""
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.x[rows], self.z[rows], self.t[rows], self.y[rows], self.schema, self.ids[rows])

    def rows_for_ids(self, ids) -> np.ndarray:
        order = np.argsort(self.ids, kind="stable")
        pos = np.searchsorted(self.ids, ids, sorter=order)
        pos = order[np.clip(pos, 0, len(order) - 1)]
        if np.any(self.ids[pos] != ids):
            raise ValidationError("unknown unit id")
        return pos

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.x, columns=list(self.schema.names))
        frame.insert(0, "id", self.ids)
        frame["z"] = self.z
        frame["t"] = self.t
        frame["y"] = self.y
        return frame

    def equals(self, other: "Dataset") -> bool:
        return (
            self.schema == other.schema
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.z, other.z)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.ids, other.ids)
        )

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.equals(other)

    __hash__ = None


def _check_codes(x, z, t, y, cardinalities):
    if x.shape[0] == 0:
        raise EmptyInputError("dataset has no units")
    bad = np.flatnonzero((z != 0) & (z != 1))
    if bad.size:
        raise ValidationError(f"instrument must be 0 or 1, got {z[bad[0]]}", row=int(bad[0]))
    for name, arr in (("t", t), ("y", y)):
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise ValidationError(f"{name} must be finite", row=int(bad[0]))
    if x.shape[1]:
        bad_rows = np.flatnonzero(((x < 0) | (x >= np.asarray(cardinalities))).any(axis=1))
        if bad_rows.size:
            raise ValidationError("covariate code outside schema cardinality", row=int(bad_rows[0]))


def infer_schema(x: np.ndarray, names: Sequence[str]) -> CovariateSchema:
    """Cardinality per column is max code + 1, floored at 2."""
    x = np.asarray(x)
    if x.shape[0] == 0:
        card = [2] * x.shape[1]
    else:
        card = [max(2, int(c) + 1) for c in x.max(axis=0)]
    return CovariateSchema(tuple(names), tuple(card))


def make_dataset(x, z, t, y, names=None, schema=None, ids=None) -> Dataset:
    x = np.asarray(x, dtype=np.int64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if schema is None:
        names = names or [f"x{j}" for j in range(x.shape[1])]
        schema = infer_schema(x, names)
    return Dataset(x, z, t, y, schema, ids)


# --- coarsening -----------------------------------------------------------------


@dataclass(frozen=True)
class CoarseningSpec:
    column: str
    bins: int = 5
    strategy: str = "quantile"
    edges: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.bins < 2:
            raise ConfigurationError("bin count must be >= 2")
        if self.strategy not in ("quantile", "fixed"):
            raise ConfigurationError(f"unknown coarsening strategy {self.strategy!r}")
        if self.strategy == "fixed":
            if self.edges is None or len(self.edges) != self.bins - 1:
                raise ConfigurationError("fixed strategy needs bins - 1 inner edges")
            if any(b < a for a, b in zip(self.edges, self.edges[1:])):
                raise ConfigurationError("bin edges must be nondecreasing")


@dataclass(frozen=True)
class Coarsened:
    codes: np.ndarray
    edges: np.ndarray  # inner cut points; code = number of edges strictly below the value
    bins: int


def coarsen(values, spec: CoarseningSpec) -> Coarsened:
    """Map real values onto ordinal codes ``0..bins-1``.

    Bins are right-closed: a value equal to an edge lands in the lower bin.
    When the data has no more distinct values than requested bins, each
    distinct value gets its own code and the reported bin count shrinks.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        bad = int(np.flatnonzero(~np.isfinite(v))[0])
        raise ValidationError(f"column {spec.column} is not finite", row=bad)
    if spec.strategy == "fixed":
        edges = np.asarray(spec.edges, dtype=np.float64)
    else:
        distinct = np.unique(v)
        if distinct.size <= spec.bins:
            edges = (distinct[:-1] + distinct[1:]) / 2.0
        else:
            qs = np.quantile(v, np.arange(1, spec.bins) / spec.bins)
            edges = np.unique(qs)
            # an edge at the maximum would leave the top bin empty
            edges = edges[edges < distinct[-1]]
    codes = np.searchsorted(edges, v, side="left").astype(np.int64)
    return Coarsened(codes, edges, int(edges.size + 1))


def coarsen_frame(frame: pd.DataFrame, specs: Sequence[CoarseningSpec]):
    """Coarsen several columns of ``frame``; returns (new frame, edges by column)."""
    out = frame.copy()
    sidecar = {}
    for spec in specs:
        if spec.column not in frame.columns:
            raise ConfigurationError(f"coarsening column {spec.column!r} not in input")
        res = coarsen(frame[spec.column].to_numpy(), spec)
        out[spec.column] = res.codes
        sidecar[spec.column] = {"bins": res.bins, "requested_bins": spec.bins, "edges": res.edges.tolist()}
    return out, sidecar


# --- CSV I/O ----------------------------------------------------------------------


def resolve_roles(columns: Sequence[str], column_roles: Mapping[str, str] | None) -> dict[str, str]:
    """Assign a role to every column.

    Columns not named in ``column_roles`` are covariates, except that the
    default names ``z``, ``t``, ``y`` and ``id`` take their usual role when no
    other column claims it.
    """
    roles = dict(column_roles or {})
    for col, role in roles.items():
        if role not in ROLES:
            raise ConfigurationError(f"unknown role {role!r} for column {col!r}")
        if col not in columns:
            raise ConfigurationError(f"column {col!r} not found in input")
    claimed = set(roles.values())
    for role, default in DEFAULT_NAMES.items():
        if role not in claimed and default in columns and default not in roles:
            roles[default] = role
    for col in columns:
        roles.setdefault(col, "covariate")
    for role in ("instrument", "treatment", "outcome"):
        count = sum(r == role for r in roles.values())
        if count != 1:
            raise ConfigurationError(f"need exactly one {role} column, found {count}")
    if sum(r == "id" for r in roles.values()) > 1:
        raise ConfigurationError("at most one id column allowed")
    return roles


def _integer_column(col: pd.Series, name: str) -> np.ndarray:
    values = pd.to_numeric(col, errors="coerce").to_numpy(dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(values) | (values != np.round(values)))
    if bad.size:
        raise ValidationError(f"column {name!r} holds non-integer value {col.iloc[bad[0]]!r}", row=int(bad[0]))
    return values.astype(np.int64)


def _real_column(col: pd.Series, name: str) -> np.ndarray:
    values = pd.to_numeric(col, errors="coerce").to_numpy(dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise ValidationError(f"column {name!r} holds missing or non-numeric value", row=int(bad[0]))
    return values


def dataset_from_frame(
    frame: pd.DataFrame,
    column_roles: Mapping[str, str] | None = None,
    schema: CovariateSchema | None = None,
) -> Dataset:
    if len(frame) == 0:
        raise EmptyInputError("input has no data rows")
    roles = resolve_roles(list(frame.columns), column_roles)
    by_role = {r: [c for c in frame.columns if roles[c] == r] for r in ROLES}
    covs = by_role["covariate"]
    x = np.column_stack([_integer_column(frame[c], c) for c in covs]) if covs else np.zeros((len(frame), 0), np.int64)
    zcol = by_role["instrument"][0]
    z = _integer_column(frame[zcol], zcol)
    t = _real_column(frame[by_role["treatment"][0]], by_role["treatment"][0])
    y = _real_column(frame[by_role["outcome"][0]], by_role["outcome"][0])
    ids = _integer_column(frame[by_role["id"][0]], "id") if by_role["id"] else None
    if schema is None:
        schema = infer_schema(x, covs)
    elif list(schema.names) != covs:
        raise ConfigurationError("schema names do not match covariate columns")
    return Dataset(x, z, t, y, schema, ids)


def load_dataset(
    path,
    column_roles: Mapping[str, str] | None = None,
    schema: CovariateSchema | None = None,
    coarsening: Sequence[CoarseningSpec] = (),
) -> Dataset:
    """Read a CSV file into a validated :class:`Dataset`.

    Row order is preserved. Covariate columns holding reals must be listed in
    ``coarsening``; they are binned before validation.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"input file {path} does not exist")
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise EmptyInputError(f"{path} is empty") from None
    if coarsening:
        frame, _ = coarsen_frame(frame, coarsening)
    return dataset_from_frame(frame, column_roles, schema)


def save_dataset(d: Dataset, path) -> None:
    d.to_frame().to_csv(path, index=False, float_format=None)


def save_schema(schema: CovariateSchema, path) -> None:
    Path(path).write_text(json.dumps({"names": list(schema.names), "cardinalities": list(schema.cardinalities)}))


def load_schema(path) -> CovariateSchema:
    raw = json.loads(Path(path).read_text())
    return CovariateSchema(tuple(raw["names"]), tuple(raw["cardinalities"]))


# --- holdout split ----------------------------------------------------------------


def split_holdout(d: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset | None]:
    """Random disjoint split into (training, holdout).

    The holdout has ``round(fraction * n)`` units (halves round up). Both
    parts keep the original row order. With ``fraction == 0`` the holdout is
    ``None`` since a dataset cannot be empty.
    """
    if not 0.0 <= fraction < 1.0:
        raise ConfigurationError(f"holdout fraction must lie in [0, 1), got {fraction}")
    size = int(np.floor(fraction * d.n + 0.5))
    if size == 0:
        return d, None
    if size >= d.n:
        raise ConfigurationError("holdout would consume the whole dataset")
    rng = np.random.default_rng(seed)
    chosen = np.zeros(d.n, dtype=bool)
    chosen[rng.permutation(d.n)[:size]] = True
    return d.subset(np.flatnonzero(~chosen)), d.subset(np.flatnonzero(chosen))
