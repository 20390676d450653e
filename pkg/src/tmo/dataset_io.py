"""Loading, validating and cleaning unit-level (optionally panel) data.

A dataset is read from delimited text in long format: one row per unit, or
one row per (unit, period) when a period column is given.  Everything is
pivoted into dense ``(n, t, ...)`` arrays so the downstream modules never
deal with labels.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd

from ._log import warn
from .errors import DataError

__all__ = [
    "Schema",
    "CleaningPolicy",
    "RegressionDataset",
    "load_dataset",
    "save_dataset",
    "standardize_outcomes",
    "dataset_from_arrays",
]

_LIST_KEYS = ("aux", "covariates", "fixed_effects")
_SCALAR_KEYS = (
    "outcome",
    "treatment",
    "weights",
    "cluster",
    "lat",
    "lon",
    "unit",
    "period",
    "instrument",
)


@dataclass(frozen=True)
class Schema:
    """Mapping from column roles to column names."""

    outcome: str
    aux: tuple[str, ...]
    treatment: str
    covariates: tuple[str, ...] = ()
    fixed_effects: tuple[str, ...] = ()
    weights: str | None = None
    cluster: str | None = None
    lat: str | None = None
    lon: str | None = None
    unit: str | None = None
    period: str | None = None
    instrument: str | None = None

    def __post_init__(self):
        for key in _LIST_KEYS:
            val = getattr(self, key)
            if isinstance(val, str):
                val = _split_list(val)
            object.__setattr__(self, key, tuple(val))
        if (self.lat is None) != (self.lon is None):
            raise DataError("lat and lon must be given together", "dataset_io")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "Schema":
        unknown = set(mapping) - set(_LIST_KEYS) - set(_SCALAR_KEYS)
        if unknown:
            raise DataError(f"unknown schema keys: {sorted(unknown)}", "dataset_io")
        for key in ("outcome", "aux", "treatment"):
            if not mapping.get(key):
                raise DataError(f"schema is missing required key {key!r}", "dataset_io")
        kwargs = {k: v for k, v in mapping.items() if v not in (None, "")}
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "Schema":
        """Parse a ``key=value`` schema file (``#`` starts a comment)."""
        mapping: dict[str, str] = {}
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value", "dataset_io")
            key, value = (s.strip() for s in line.split("=", 1))
            mapping[key] = value
        return cls.from_mapping(mapping)

    def to_lines(self) -> str:
        out = []
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if val is None or val == ():
                continue
            if isinstance(val, tuple):
                val = ",".join(val)
            out.append(f"{f.name}={val}")
        return "\n".join(out) + "\n"

    def columns(self) -> list[str]:
        cols = [self.outcome, self.treatment, *self.aux, *self.covariates, *self.fixed_effects]
        for key in ("weights", "cluster", "lat", "lon", "unit", "period", "instrument"):
            if getattr(self, key) is not None:
                cols.append(getattr(self, key))
        return cols


def _split_list(value: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in value.split(",") if s.strip())


@dataclass(frozen=True)
class CleaningPolicy:
    standardize_within_period: bool = True
    winsor_lo: float = 0.001
    winsor_hi: float = 0.999
    drop_missing_threshold: float = 0.5
    ddof: int = 0

    def __post_init__(self):
        if not 0.0 <= self.winsor_lo < self.winsor_hi <= 1.0:
            raise ValueError("need 0 <= winsor_lo < winsor_hi <= 1")
        if not 0.0 <= self.drop_missing_threshold <= 1.0:
            raise ValueError("drop_missing_threshold must lie in [0, 1]")
        if self.ddof not in (0, 1):
            raise ValueError("ddof must be 0 or 1")


def _frozen_copy(a: np.ndarray) -> np.ndarray:
    if not a.flags.writeable:
        return a
    a = a.copy()
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RegressionDataset:
    """Units x periods arrays for the outcome of interest and auxiliary outcomes.

    Shapes: ``y0, w, weights, instrument`` are ``(n, t)``; ``aux`` is
    ``(n, t, d)``; ``x`` is ``(n, t, k)``; ``fe`` holds fixed-effect labels
    ``(n, t, m)``; ``clusters`` is ``(n,)`` and ``coords`` is ``(n, 2)`` of
    (latitude, longitude) in degrees.
    """

    unit_ids: np.ndarray
    period_ids: np.ndarray
    y0: np.ndarray
    aux: np.ndarray
    w: np.ndarray
    x: np.ndarray
    schema: Schema
    fe: np.ndarray | None = None
    weights: np.ndarray | None = None
    clusters: np.ndarray | None = None
    coords: np.ndarray | None = None
    instrument: np.ndarray | None = None
    warnings: tuple = field(default=(), compare=False)

    def __post_init__(self):
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if isinstance(val, np.ndarray):
                object.__setattr__(self, f.name, _frozen_copy(val))
        n, t = self.y0.shape
        if n < 3:
            raise DataError(f"need at least 3 complete units, got {n}", "dataset_io")
        if t < 1:
            raise DataError("need at least one period", "dataset_io")
        if self.aux.ndim != 3 or self.aux.shape[:2] != (n, t):
            raise DataError("aux must have shape (n, t, d)", "dataset_io")
        if self.aux.shape[2] < 2:
            raise DataError(f"need at least 2 auxiliary outcomes, got {self.aux.shape[2]}",
                            "dataset_io")
        if self.w.shape != (n, t) or self.x.shape[:2] != (n, t):
            raise DataError("treatment/covariates do not match (n, t)", "dataset_io")
        if self.weights is not None:
            if self.weights.shape != (n, t):
                raise DataError("weights must have shape (n, t)", "dataset_io")
            if not np.all(self.weights > 0):
                raise DataError("weights must be strictly positive", "dataset_io")
        if self.clusters is not None and len(self.clusters) != n:
            raise DataError("one cluster label per unit required", "dataset_io")
        if self.coords is not None:
            _check_coords(self.coords)

    @property
    def n(self) -> int:
        return self.y0.shape[0]

    @property
    def t(self) -> int:
        return self.y0.shape[1]

    @property
    def d(self) -> int:
        return self.aux.shape[2]

    @property
    def k(self) -> int:
        return self.x.shape[2]

    @property
    def aux_names(self) -> tuple[str, ...]:
        return self.schema.aux

    def replace(self, **changes) -> "RegressionDataset":
        return dataclasses.replace(self, **changes)


def _check_coords(coords):
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DataError("coords must have shape (n, 2)", "dataset_io")
    lat, lon = coords[:, 0], coords[:, 1]
    if not (np.all(np.isfinite(coords)) and np.all(np.abs(lat) <= 90) and np.all(np.abs(lon) <= 180)):
        raise DataError("invalid coordinates (|lat| <= 90 and |lon| <= 180 required)", "dataset_io")


def dataset_from_arrays(
    y0,
    aux,
    w,
    x=None,
    *,
    weights=None,
    clusters=None,
    coords=None,
    instrument=None,
    fe=None,
    aux_names: Sequence[str] | None = None,
) -> RegressionDataset:
    """Build a dataset directly from arrays.

    One-dimensional inputs are treated as a cross-section (``t = 1``); a 2-D
    ``aux`` is read as ``(n, d)``.
    """
    y0 = np.asarray(y0, dtype=float)
    cross = y0.ndim == 1
    if cross:
        y0 = y0[:, None]
    n, t = y0.shape
    aux = np.asarray(aux, dtype=float)
    if aux.ndim == 2:
        aux = aux[:, None, :]
    w = np.asarray(w, dtype=float).reshape(n, t)
    if x is None:
        x = np.zeros((n, t, 0))
    else:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(n, t, 1)
        elif x.ndim == 2:
            x = x.reshape(n, t, -1) if not cross else x[:, None, :]
    if weights is not None:
        weights = np.asarray(weights, dtype=float).reshape(n, t)
    if instrument is not None:
        instrument = np.asarray(instrument, dtype=float).reshape(n, t)
    if fe is not None:
        fe = np.asarray(fe, dtype=object)
        fe = fe.reshape(n, t, -1)
    if clusters is not None:
        clusters = np.asarray(clusters)
    if coords is not None:
        coords = np.asarray(coords, dtype=float)
    d = aux.shape[2]
    names = tuple(aux_names) if aux_names is not None else tuple(f"aux{j}" for j in range(d))
    schema = Schema(
        outcome="y",
        aux=names,
        treatment="w",
        covariates=tuple(f"x{j}" for j in range(x.shape[2])),
        fixed_effects=tuple(f"fe{j}" for j in range(fe.shape[2])) if fe is not None else (),
        weights="weight" if weights is not None else None,
        cluster="cluster" if clusters is not None else None,
        lat="lat" if coords is not None else None,
        lon="lon" if coords is not None else None,
        unit="unit",
        period="period" if t > 1 else None,
        instrument="z" if instrument is not None else None,
    )
    return RegressionDataset(
        unit_ids=np.arange(n),
        period_ids=np.arange(t),
        y0=y0,
        aux=aux,
        w=w,
        x=x,
        schema=schema,
        fe=fe,
        weights=weights,
        clusters=clusters,
        coords=coords,
        instrument=instrument,
    )


def _numeric(df: pd.DataFrame, cols: Sequence[str]) -> pd.DataFrame:
    out = {}
    for c in cols:
        col = df[c]
        conv = pd.to_numeric(col, errors="coerce")
        bad = conv.isna() & col.notna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(f"column {c!r} has non-numeric value {col.iloc[row]!r}", "dataset_io")
        out[c] = conv.astype(float)
    return pd.DataFrame(out, index=df.index)


def load_dataset(
    path: str | Path,
    schema: Schema | Mapping[str, Any],
    policy: CleaningPolicy | None = None,
    sep: str = ",",
) -> RegressionDataset:
    """Read a delimited file into a validated :class:`RegressionDataset`.

    Units with a missing outcome, treatment or other required value are
    dropped; auxiliary columns missing for more than
    ``policy.drop_missing_threshold`` of cells are dropped; remaining missing
    auxiliary cells are filled with the period mean.  Every such action is
    recorded in ``dataset.warnings``.
    """
    if not isinstance(schema, Schema):
        schema = Schema.from_mapping(schema)
    policy = policy or CleaningPolicy()
    records: list[dict] = []
    try:
        df = pd.read_csv(path, sep=sep, float_precision="round_trip", encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"malformed file {path}: {exc}", "dataset_io") from exc
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}", "dataset_io") from exc
    missing = [c for c in schema.columns() if c not in df.columns]
    if missing:
        raise DataError(f"schema columns absent from file: {missing}", "dataset_io")
    if len(set(schema.aux)) != len(schema.aux):
        raise DataError("duplicate auxiliary columns in schema", "dataset_io")

    if schema.period is not None:
        if schema.unit is None:
            raise DataError("panel data needs a unit column", "dataset_io")
        if df[schema.period].isna().any() or df[schema.unit].isna().any():
            raise DataError("unit/period identifiers may not be missing", "dataset_io")
        if df.duplicated([schema.unit, schema.period]).any():
            raise DataError("duplicate (unit, period) rows", "dataset_io")
        unit_ids = pd.unique(df[schema.unit])
        period_ids = np.sort(pd.unique(df[schema.period]))
        if len(df) != len(unit_ids) * len(period_ids):
            raise DataError("unbalanced panel: every unit needs every period", "dataset_io")
        df = df.set_index([schema.unit, schema.period]).reindex(
            pd.MultiIndex.from_product([unit_ids, period_ids])
        )
    else:
        if schema.unit is not None:
            if df[schema.unit].duplicated().any():
                raise DataError("duplicate unit identifiers", "dataset_io")
            unit_ids = df[schema.unit].to_numpy()
        else:
            unit_ids = np.arange(len(df))
        period_ids = np.array([0])
    n, t = len(unit_ids), len(period_ids)

    core = [schema.outcome, schema.treatment, *schema.covariates]
    for key in ("weights", "lat", "lon", "instrument"):
        if getattr(schema, key) is not None:
            core.append(getattr(schema, key))
    num = _numeric(df, core)
    aux_df = _numeric(df, schema.aux)

    bad_cells = num.isna().any(axis=1).to_numpy()
    for c in (*schema.fixed_effects, *([schema.cluster] if schema.cluster else [])):
        bad_cells |= df[c].isna().to_numpy()
    bad_unit = bad_cells.reshape(n, t).any(axis=1)
    if bad_unit.any():
        warn(records, "dataset_io", "units_dropped",
             "units with missing required values dropped",
             count=int(bad_unit.sum()), units=[_jsonable(u) for u in np.asarray(unit_ids)[bad_unit]])
    keep_rows = np.repeat(~bad_unit, t)
    unit_ids = np.asarray(unit_ids)[~bad_unit]
    n = len(unit_ids)
    if n < 3:
        raise DataError(f"fewer than 3 complete units ({n})", "dataset_io")
    num = num[keep_rows]
    aux_df = aux_df[keep_rows]
    df = df[keep_rows]

    frac_missing = aux_df.isna().mean(axis=0)
    dropped = [c for c in schema.aux if frac_missing[c] > policy.drop_missing_threshold]
    if dropped:
        warn(records, "dataset_io", "aux_dropped_missing",
             "auxiliary outcomes dropped for missingness",
             columns=dropped, threshold=policy.drop_missing_threshold)
    kept_aux = tuple(c for c in schema.aux if c not in dropped)
    if len(kept_aux) < 2:
        raise DataError(f"fewer than 2 auxiliary outcomes remain after drops ({len(kept_aux)})",
                        "dataset_io")

    aux = aux_df[list(kept_aux)].to_numpy().reshape(n, t, len(kept_aux))
    holes = np.isnan(aux)
    if holes.any():
        means = np.nanmean(aux, axis=0, keepdims=True)
        if np.isnan(means).any():
            raise DataError("an auxiliary outcome is entirely missing in some period", "dataset_io")
        aux = np.where(holes, means, aux)
        warn(records, "dataset_io", "aux_imputed",
             "missing auxiliary cells imputed with the period mean",
             cells=int(holes.sum()),
             columns=[c for c, h in zip(kept_aux, holes.any(axis=(0, 1))) if h])

    def grid(col):
        return num[col].to_numpy().reshape(n, t)

    x = (num[list(schema.covariates)].to_numpy().reshape(n, t, len(schema.covariates))
         if schema.covariates else np.zeros((n, t, 0)))
    fe = None
    if schema.fixed_effects:
        fe = df[list(schema.fixed_effects)].to_numpy(dtype=object).reshape(n, t, -1)
    clusters = None
    if schema.cluster is not None:
        lab = df[schema.cluster].to_numpy(dtype=object).reshape(n, t)
        if t > 1 and not all(len(set(row)) == 1 for row in lab):
            raise DataError("cluster label must be constant within unit", "dataset_io")
        clusters = lab[:, 0]
    coords = None
    if schema.lat is not None:
        lat, lon = grid(schema.lat), grid(schema.lon)
        if t > 1 and (np.any(lat != lat[:, :1]) or np.any(lon != lon[:, :1])):
            raise DataError("coordinates must be constant within unit", "dataset_io")
        coords = np.column_stack([lat[:, 0], lon[:, 0]])
    weights = grid(schema.weights) if schema.weights is not None else None
    if weights is not None and not np.all(weights > 0):
        raise DataError("nonpositive weight", "dataset_io")
    instrument = grid(schema.instrument) if schema.instrument is not None else None

    return RegressionDataset(
        unit_ids=unit_ids,
        period_ids=np.asarray(period_ids),
        y0=grid(schema.outcome),
        aux=aux,
        w=grid(schema.treatment),
        x=x,
        schema=dataclasses.replace(schema, aux=kept_aux),
        fe=fe,
        weights=weights,
        clusters=clusters,
        coords=coords,
        instrument=instrument,
        warnings=tuple(records),
    )


def _jsonable(v):
    return v.item() if isinstance(v, np.generic) else v


def save_dataset(ds: RegressionDataset, path: str | Path, sep: str = ",") -> Schema:
    """Write ``ds`` as long-format delimited text; returns the schema to reload it.

    Floats are written with ``repr`` precision so that a reload reproduces the
    numeric content bit for bit.
    """
    s = ds.schema
    n, t = ds.n, ds.t
    cols: dict[str, Any] = {}
    unit = s.unit or "unit"
    cols[unit] = np.repeat(ds.unit_ids, t)
    period = s.period
    if t > 1:
        period = period or "period"
        cols[period] = np.tile(ds.period_ids, n)
    cols[s.outcome] = ds.y0.ravel()
    cols[s.treatment] = ds.w.ravel()
    for j, name in enumerate(s.aux):
        cols[name] = ds.aux[:, :, j].ravel()
    for j, name in enumerate(s.covariates):
        cols[name] = ds.x[:, :, j].ravel()
    for j, name in enumerate(s.fixed_effects):
        cols[name] = ds.fe[:, :, j].ravel()
    if ds.weights is not None:
        cols[s.weights] = ds.weights.ravel()
    if ds.instrument is not None:
        cols[s.instrument] = ds.instrument.ravel()
    if ds.clusters is not None:
        cols[s.cluster] = np.repeat(ds.clusters, t)
    if ds.coords is not None:
        cols[s.lat] = np.repeat(ds.coords[:, 0], t)
        cols[s.lon] = np.repeat(ds.coords[:, 1], t)
    pd.DataFrame(cols).to_csv(path, sep=sep, index=False, float_format=None)
    return dataclasses.replace(s, unit=unit, period=period if t > 1 else None)


def standardize_outcomes(ds: RegressionDataset, policy: CleaningPolicy | None = None) -> RegressionDataset:
    """Standardize each auxiliary outcome (within period by default) and winsorize.

    Columns with zero variance in any period are dropped with a warning.
    Winsorization clamps values outside the ``winsor_lo``/``winsor_hi``
    empirical quantiles (linear interpolation) of the standardized column.
    """
    policy = policy or CleaningPolicy()
    records = list(ds.warnings)
    aux = np.array(ds.aux, dtype=float)
    groups = [slice(s, s + 1) for s in range(ds.t)] if policy.standardize_within_period else [slice(None)]

    sd = np.empty((len(groups), ds.d))
    for g, sl in enumerate(groups):
        sd[g] = aux[:, sl, :].reshape(-1, ds.d).std(axis=0, ddof=policy.ddof)
    degenerate = np.any(~(sd > 0), axis=0)
    if degenerate.any():
        names = [ds.aux_names[j] for j in np.flatnonzero(degenerate)]
        warn(records, "dataset_io", "aux_dropped_constant",
             "zero-variance auxiliary outcomes dropped", columns=names)
        if (~degenerate).sum() < 2:
            raise DataError(f"fewer than 2 non-degenerate auxiliary outcomes (dropped {names})",
                            "dataset_io")
    keep = np.flatnonzero(~degenerate)
    aux = aux[:, :, keep]

    for sl in groups:
        block = aux[:, sl, :]
        flat = block.reshape(-1, block.shape[2])
        mu = flat.mean(axis=0)
        sig = flat.std(axis=0, ddof=policy.ddof)
        block = (block - mu) / sig
        if policy.winsor_lo > 0.0 or policy.winsor_hi < 1.0:
            flat = block.reshape(-1, block.shape[2])
            lo = np.quantile(flat, policy.winsor_lo, axis=0)
            hi = np.quantile(flat, policy.winsor_hi, axis=0)
            block = np.clip(block, lo, hi)
        aux[:, sl, :] = block

    schema = dataclasses.replace(ds.schema, aux=tuple(ds.aux_names[j] for j in keep))
    return ds.replace(aux=aux, schema=schema, warnings=tuple(records))

