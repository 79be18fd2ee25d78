"""Tabular geographic data: ingestion, standardization, district aggregation
and a synthetic generator shaped like the MEDSAT health/environment table.

Coordinates are planar (projected metres); no geodesic math is done here.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, IngestionError, SchemaError

logger = logging.getLogger(__name__)

__all__ = [
    "CsvSchema",
    "GeoDataset",
    "ScalingRecord",
    "DistrictAggregate",
    "GroundTruth",
    "SynthConfig",
    "load_csv",
    "write_csv",
    "standardize",
    "aggregate_by_district",
    "synth_medsat",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CsvSchema:
    """Column roles of an input table.

    ``features=None`` means every remaining numeric column is a feature and
    ``outcomes=None`` means every column starting with ``outcome_prefix``.
    """

    id: str = "unit_id"
    district: str = "district_id"
    x: str = "x"
    y: str = "y"
    outcome_prefix: str = "o_"
    outcomes: tuple[str, ...] | None = None
    features: tuple[str, ...] | None = None
    year: str = "year"
    ignore: tuple[str, ...] = ()

    @classmethod
    def from_mapping(cls, m: Mapping[str, Any] | None) -> "CsvSchema":
        if not m:
            return cls()
        kw = dict(m)
        for key in ("outcomes", "features", "ignore"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        unknown = set(kw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**kw)


@dataclass(frozen=True)
class GeoDataset:
    """One row per areal unit (LSOA), grouped into districts (LAD)."""

    unit_id: np.ndarray
    district_id: np.ndarray
    coords: np.ndarray
    features: np.ndarray
    feature_names: tuple[str, ...]
    outcomes: np.ndarray
    outcome_names: tuple[str, ...]
    year: int | None = None
    dropped_rows: int = 0
    constant_features: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("unit_id", "district_id", "coords", "features", "outcomes"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        n = len(self.unit_id)
        if self.features.ndim != 2 or self.outcomes.ndim != 2:
            raise ValueError("features and outcomes must be 2-D")
        if not (len(self.district_id) == self.coords.shape[0] == self.features.shape[0]
                == self.outcomes.shape[0] == n):
            raise ValueError("row counts disagree between GeoDataset fields")
        if self.features.shape[1] != len(self.feature_names):
            raise ValueError("feature_names length does not match features")
        if self.outcomes.shape[1] != len(self.outcome_names):
            raise ValueError("outcome_names length does not match outcomes")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coordinates must be finite")

    @property
    def n(self) -> int:
        return len(self.unit_id)

    @property
    def p(self) -> int:
        return len(self.feature_names)

    @property
    def m(self) -> int:
        return len(self.outcome_names)

    @property
    def districts(self) -> list[str]:
        return sorted(set(self.district_id.tolist()))

    def feature(self, name: str) -> np.ndarray:
        return self.features[:, self.feature_names.index(name)]

    def outcome(self, name: str) -> np.ndarray:
        try:
            return self.outcomes[:, self.outcome_names.index(name)]
        except ValueError:
            raise ConfigError(f"unknown outcome {name!r}; have {list(self.outcome_names)}") from None

    def feature_matrix(self, names: Sequence[str]) -> np.ndarray:
        missing = [c for c in names if c not in self.feature_names]
        if missing:
            raise ConfigError(f"unknown features: {missing}")
        idx = [self.feature_names.index(c) for c in names]
        return np.asarray(self.features[:, idx])

    def select_features(self, names: Sequence[str]) -> "GeoDataset":
        return replace(self, features=self.feature_matrix(names), feature_names=tuple(names),
                       constant_features=tuple(c for c in self.constant_features if c in names))

    def take(self, rows) -> "GeoDataset":
        rows = np.asarray(rows)
        return replace(self, unit_id=self.unit_id[rows], district_id=self.district_id[rows],
                       coords=self.coords[rows], features=self.features[rows],
                       outcomes=self.outcomes[rows])


@dataclass(frozen=True)
class ScalingRecord:
    names: tuple[str, ...]
    means: np.ndarray
    sds: np.ndarray
    constant: np.ndarray

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        sds = np.where(self.constant, 0.0, self.sds)
        return np.asarray(Z) * sds + self.means


@dataclass(frozen=True)
class DistrictAggregate:
    district_id: str
    centroid: np.ndarray
    mean_features: np.ndarray
    mean_outcomes: np.ndarray
    row_count: int
    feature_names: tuple[str, ...] = ()
    outcome_names: tuple[str, ...] = ()

    def feature(self, name: str) -> float:
        return float(self.mean_features[self.feature_names.index(name)])

    def outcome(self, name: str) -> float:
        return float(self.mean_outcomes[self.outcome_names.index(name)])


# ---------------------------------------------------------------------------
# CSV ingestion

def load_csv(path, schema: CsvSchema | Mapping | None = None) -> GeoDataset:
    """Read a unit-level CSV into a :class:`GeoDataset`.

    Rows with a missing id, an unparseable number or a non-finite coordinate in
    any selected column are dropped (listwise deletion); the count is kept in
    ``dropped_rows`` and logged.
    """
    if not isinstance(schema, CsvSchema):
        schema = CsvSchema.from_mapping(schema)
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise IngestionError(f"{path}: file is empty") from None
    if df.shape[1] == 0:
        raise IngestionError(f"{path}: no header row")
    if len(df) == 0:
        raise IngestionError(f"{path}: header present but no data rows")

    for col in (schema.id, schema.district, schema.x, schema.y):
        if col not in df.columns:
            raise SchemaError(f"{path}: missing mandatory column {col!r}")

    if schema.outcomes is not None:
        outcomes = list(schema.outcomes)
    else:
        outcomes = [c for c in df.columns if c.startswith(schema.outcome_prefix)]
    for col in outcomes:
        if col not in df.columns:
            raise SchemaError(f"{path}: missing outcome column {col!r}")
    if not outcomes:
        raise SchemaError(f"{path}: no outcome columns (prefix {schema.outcome_prefix!r})")

    reserved = {schema.id, schema.district, schema.x, schema.y, schema.year,
                *outcomes, *schema.ignore}
    numeric = {c: pd.to_numeric(df[c].str.strip(), errors="coerce")
               for c in df.columns if c not in (schema.id, schema.district)}
    if schema.features is not None:
        features = list(schema.features)
        for col in features:
            if col not in df.columns:
                raise SchemaError(f"{path}: missing feature column {col!r}")
    else:
        features = []
        for c in df.columns:
            if c in reserved:
                continue
            if numeric[c].notna().any():
                features.append(c)
            else:
                logger.info("ignoring non-numeric column %r", c)

    ids = df[schema.id].str.strip()
    dis = df[schema.district].str.strip()
    num = pd.DataFrame({c: numeric[c] for c in [schema.x, schema.y, *outcomes, *features]})
    ok = (ids != "") & (dis != "") & np.isfinite(num.to_numpy(dtype=float)).all(axis=1)
    dropped = int((~ok).sum())
    if dropped:
        logger.warning("%s: dropped %d of %d rows with missing or unparseable values",
                       path, dropped, len(df))
    if not ok.any():
        raise IngestionError(f"{path}: every row was dropped during validation")

    year = None
    if schema.year in df.columns:
        years = numeric[schema.year][ok].dropna().unique()
        if len(years) > 1:
            raise IngestionError(f"{path}: multiple years in one file: {sorted(years)}")
        if len(years) == 1:
            year = int(years[0])

    num = num[ok]
    return GeoDataset(
        unit_id=ids[ok].to_numpy(dtype=str),
        district_id=dis[ok].to_numpy(dtype=str),
        coords=num[[schema.x, schema.y]].to_numpy(dtype=float),
        features=num[features].to_numpy(dtype=float).reshape(len(num), len(features)),
        feature_names=tuple(features),
        outcomes=num[outcomes].to_numpy(dtype=float),
        outcome_names=tuple(outcomes),
        year=year,
        dropped_rows=dropped,
    )


def write_csv(d: GeoDataset, path) -> None:
    """Write ``d`` in the input layout (full float precision)."""
    cols: dict[str, Any] = {
        "unit_id": d.unit_id,
        "district_id": d.district_id,
        "x": d.coords[:, 0],
        "y": d.coords[:, 1],
    }
    if d.year is not None:
        cols["year"] = np.full(d.n, d.year)
    for j, name in enumerate(d.outcome_names):
        cols[name] = d.outcomes[:, j]
    for j, name in enumerate(d.feature_names):
        cols[name] = d.features[:, j]
    pd.DataFrame(cols).to_csv(path, index=False, float_format="%.17g")


# ---------------------------------------------------------------------------
# standardization and aggregation

def _column_scaling(A: np.ndarray):
    means = A.mean(axis=0)
    if A.shape[0] > 1:
        sds = A.std(axis=0, ddof=1)
    else:
        sds = np.zeros(A.shape[1])
    constant = sds <= 1e-12 * np.maximum(1.0, np.abs(means))
    return means, sds, constant


def standardize(d: GeoDataset) -> tuple[GeoDataset, ScalingRecord]:
    """Z-score every feature column with the sample (n-1) standard deviation.

    Constant columns become all-zero and are listed in
    ``constant_features``; downstream stages exclude them.
    """
    if d.n < 2:
        raise ConfigError("standardize needs at least 2 rows")
    means, sds, constant = _column_scaling(d.features)
    Z = np.where(constant, 0.0, (d.features - means) / np.where(constant, 1.0, sds))
    rec = ScalingRecord(d.feature_names, _frozen(means), _frozen(sds), _frozen(constant))
    flagged = tuple(n for n, c in zip(d.feature_names, constant) if c)
    if flagged:
        logger.warning("constant feature columns flagged: %s", ", ".join(flagged))
    return replace(d, features=Z, constant_features=flagged), rec


def aggregate_by_district(d: GeoDataset) -> list[DistrictAggregate]:
    """Centroid and column means per district, sorted by district id.

    Rows are summed in (district, unit) order so the result does not depend on
    the input row order.
    """
    order = np.lexsort((d.unit_id, d.district_id))
    dist = d.district_id[order]
    starts = np.flatnonzero(np.r_[True, dist[1:] != dist[:-1]])
    ends = np.r_[starts[1:], len(order)]
    out = []
    for s, e in zip(starts, ends):
        rows = order[s:e]
        out.append(DistrictAggregate(
            district_id=str(dist[s]),
            centroid=_frozen(d.coords[rows].mean(axis=0)),
            mean_features=_frozen(d.features[rows].mean(axis=0)),
            mean_outcomes=_frozen(d.outcomes[rows].mean(axis=0)),
            row_count=int(e - s),
            feature_names=d.feature_names,
            outcome_names=d.outcome_names,
        ))
    return out


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass
class SynthConfig:
    """Generator settings.

    ``outcomes`` maps an outcome column name to ``{"active": {index: coef},
    "noise_sd": float, "intercept": float}``. A coefficient is either a number
    or a dict with ``type`` in ``linear_u``, ``linear_v`` (``offset + scale *
    u / u_max``) or ``step_u`` (``low`` left of ``at * u_max``, else ``high``).
    Feature indices are 0-based.
    """

    n: int = 2000
    p: int = 30
    n_districts: int = 20
    outcomes: dict[str, dict] = field(default_factory=dict)
    rho: float = 0.0
    spatial_share: float = 0.0
    extent: float = 200_000.0
    feature_names: list[str] | None = None
    year: int | None = 2019
    # shorthand for a single outcome "o_y"
    active: dict | None = None
    noise_sd: float = 1.0

    @classmethod
    def from_mapping(cls, m: Mapping[str, Any]) -> "SynthConfig":
        kw = dict(m)
        unknown = set(kw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**kw)

    def outcome_specs(self) -> dict[str, dict]:
        if self.outcomes:
            return self.outcomes
        return {"o_y": {"active": self.active or {}, "noise_sd": self.noise_sd}}


@dataclass(frozen=True)
class GroundTruth:
    seed: int
    outcomes: dict[str, dict]
    coefficients: dict[str, dict[str, np.ndarray]]

    def to_json(self) -> str:
        doc = {"seed": self.seed, "outcomes": {}}
        for name, spec in self.outcomes.items():
            doc["outcomes"][name] = {
                "active": {k: v for k, v in spec["active"].items()},
                "noise_sd": spec["noise_sd"],
                "intercept": spec["intercept"],
            }
        return json.dumps(doc, indent=2, sort_keys=True)


def _coef_surface(spec, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if isinstance(spec, (int, float)):
        return np.full(u.shape, float(spec))
    kind = spec.get("type")
    if kind == "linear_u":
        return spec.get("offset", 0.0) + spec.get("scale", 1.0) * u / u.max()
    if kind == "linear_v":
        return spec.get("offset", 0.0) + spec.get("scale", 1.0) * v / v.max()
    if kind == "step_u":
        return np.where(u < spec.get("at", 0.5) * u.max(), spec["low"], spec["high"])
    raise ConfigError(f"unknown coefficient type {kind!r}")


def _ar1_chol(p: int, rho: float) -> np.ndarray:
    idx = np.arange(p)
    return np.linalg.cholesky(rho ** np.abs(idx[:, None] - idx[None, :]))


def synth_medsat(config: SynthConfig | Mapping, seed: int) -> tuple[GeoDataset, GroundTruth]:
    """Generate a reproducible synthetic unit-level dataset.

    Districts get uniform random centres in an ``extent`` square; units scatter
    around their centre. Features are AR(1)-correlated Gaussians, optionally
    mixed with a district-level component (``spatial_share``). Each outcome is
    ``intercept + sum_j beta_j(u, v) x_j + noise_sd * eps``.
    """
    cfg = config if isinstance(config, SynthConfig) else SynthConfig.from_mapping(config)
    specs = cfg.outcome_specs()
    if cfg.n < 2 or cfg.p < 1 or cfg.n_districts < 1 or cfg.n_districts > cfg.n:
        raise ConfigError("generator needs n >= 2, p >= 1 and 1 <= n_districts <= n")
    if not -1 < cfg.rho < 1 or not 0 <= cfg.spatial_share <= 1:
        raise ConfigError("rho must lie in (-1, 1) and spatial_share in [0, 1]")
    names = list(cfg.feature_names) if cfg.feature_names else [f"x{j:02d}" for j in range(cfg.p)]
    if len(names) != cfg.p:
        raise ConfigError("feature_names must have p entries")
    norm_specs = {}
    for oname, spec in specs.items():
        active = {int(k): v for k, v in (spec.get("active") or {}).items()}
        bad = [k for k in active if not 0 <= k < cfg.p]
        if bad:
            raise ConfigError(f"outcome {oname!r}: active indices {bad} outside [0, {cfg.p})")
        norm_specs[oname] = {"active": active, "noise_sd": float(spec.get("noise_sd", 1.0)),
                             "intercept": float(spec.get("intercept", 0.0))}

    rng = np.random.default_rng(seed)
    L = cfg.n_districts
    centres = rng.uniform(0.0, cfg.extent, size=(L, 2))
    district = np.sort(np.arange(cfg.n) % L)
    spread = cfg.extent / (6.0 * np.sqrt(L))
    coords = centres[district] + rng.normal(0.0, spread, size=(cfg.n, 2))
    coords -= coords.min(axis=0) - 1.0

    chol = _ar1_chol(cfg.p, cfg.rho)
    X = rng.standard_normal((cfg.n, cfg.p)) @ chol.T
    if cfg.spatial_share > 0:
        G = rng.standard_normal((L, cfg.p)) @ chol.T
        X = np.sqrt(1 - cfg.spatial_share) * X + np.sqrt(cfg.spatial_share) * G[district]

    u, v = coords[:, 0], coords[:, 1]
    Y = np.empty((cfg.n, len(norm_specs)))
    surfaces: dict[str, dict[str, np.ndarray]] = {}
    for k, (oname, spec) in enumerate(norm_specs.items()):
        y = np.full(cfg.n, spec["intercept"])
        surfaces[oname] = {}
        for j, coef in sorted(spec["active"].items()):
            beta = _coef_surface(coef, u, v)
            surfaces[oname][names[j]] = _frozen(beta)
            y += beta * X[:, j]
        y += spec["noise_sd"] * rng.standard_normal(cfg.n)
        Y[:, k] = y

    width = len(str(L - 1))
    d = GeoDataset(
        unit_id=np.array([f"U{i:06d}" for i in range(cfg.n)]),
        district_id=np.array([f"D{k:0{width}d}" for k in district]),
        coords=coords,
        features=X,
        feature_names=tuple(names),
        outcomes=Y,
        outcome_names=tuple(norm_specs),
        year=cfg.year,
    )
    truth_specs = {o: {"active": {names[j]: c for j, c in s["active"].items()},
                       "noise_sd": s["noise_sd"], "intercept": s["intercept"]}
                   for o, s in norm_specs.items()}
    return d, GroundTruth(seed=seed, outcomes=truth_specs, coefficients=surfaces)
