"""Global spatial GAM over district centroids and per-district weighted GAMs."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError
from .gbt import parallel_map
from .smooth import (LAMBDA_GRID, N_SPLINES_GRID, Basis, FittedSmooth, KnotDegeneracyError,
                     SmoothSpec, ci_band, fit_pls, grid_search)

logger = logging.getLogger(__name__)

MIN_DISTRICTS = 10
RECOMMENDED_DISTRICTS = 30
# observation weights below this (relative to the largest) are treated as zero
WEIGHT_FLOOR = 1e-12
SHAPE_COLUMNS = ["term", "grid_value", "estimate", "lower", "upper", "edf"]


@dataclass(frozen=True)
class GamModel:
    """``prediction = intercept + sum of centred term contributions``."""

    intercept: float
    terms: tuple[FittedSmooth, ...]
    predictors: tuple[str, ...]
    tensor: FittedSmooth | None
    gcv: float
    edf: float
    r2: float
    n: int
    lam_main: float
    lam_tensor: float | None
    n_splines: int
    rss: float = float("nan")
    intercept_var: float = float("nan")

    def term(self, name: str) -> FittedSmooth:
        try:
            return self.terms[self.predictors.index(name)]
        except ValueError:
            raise ConfigError(f"{name!r} is not a predictor of this model") from None

    def contributions(self, X, coords=None) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, len(self.predictors))
        cols = [t.evaluate(X[:, j]) for j, t in enumerate(self.terms)]
        if self.tensor is not None:
            if coords is None:
                raise ConfigError("this model has a spatial term; pass coords")
            coords = np.asarray(coords, dtype=float)
            cols.append(self.tensor.evaluate(coords[:, 0], coords[:, 1]))
        return np.column_stack(cols) if cols else np.zeros((len(X), 0))

    def predict(self, X, coords=None) -> np.ndarray:
        return self.intercept + self.contributions(X, coords).sum(axis=1)

    def shape(self, name: str, grid, level: float = 0.95, deriv: int = 0):
        est, lo, hi, _ = ci_band(self.term(name), grid, level, deriv)
        return est, lo, hi

    def summary(self) -> dict:
        out = {
            "gcv": float(self.gcv), "edf": float(self.edf), "r2": float(self.r2), "n": int(self.n),
            "lambda_main": float(self.lam_main), "n_splines": int(self.n_splines),
            "term_edf": {p: float(t.edf) for p, t in zip(self.predictors, self.terms)},
        }
        if self.tensor is not None:
            out["lambda_tensor"] = float(self.lam_tensor)
            out["term_edf"]["spatial"] = float(self.tensor.edf)
        return out


def _weighted_r2(y, fitted, w) -> float:
    w = w / w.max()
    mu = np.sum(w * y) / np.sum(w)
    sst = float(np.sum(w * (y - mu) ** 2))
    if sst <= 0:
        return 1.0 if np.allclose(y, fitted) else 0.0
    return 1.0 - float(np.sum(w * (y - fitted) ** 2)) / sst


def fit_gam(X, y, predictors: Sequence[str], coords=None, weights=None, lam_main: float = 1.0,
            lam_tensor: float = 1.0, n_splines: int = 8, tensor_n_splines: int = 5,
            degree: int = 3, penalty_order: int = 2) -> GamModel:
    """One penalized fit at fixed smoothing parameters.

    Each column of ``X`` gets a univariate smooth; ``coords`` (n x 2) adds a
    tensor-product smooth. Knots are placed from rows with positive weight.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if X.ndim != 2 or X.shape != (n, len(predictors)):
        raise ConfigError(f"X must be {n} x {len(predictors)}, got {X.shape}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    spec = SmoothSpec("univariate", n_splines, degree, penalty_order, lam_main)
    bases, blocks, pens, lams = [], [], [], []
    for j in range(X.shape[1]):
        b = Basis.build(spec, X[:, j], weights=w)
        bases.append(b)
        blocks.append(b.design(X[:, j]))
        pens.append(b.penalties())
        lams.append(lam_main)
    if coords is not None:
        coords = np.asarray(coords, dtype=float)
        tspec = SmoothSpec("tensor2d", tensor_n_splines, degree, penalty_order,
                           (lam_tensor, lam_tensor))
        b = Basis.build(tspec, coords[:, 0], coords[:, 1], weights=w)
        bases.append(b)
        blocks.append(b.design(coords[:, 0], coords[:, 1]))
        pens.append(b.penalties())
        lams.append([lam_tensor, lam_tensor])
    fit = fit_pls(blocks, pens, y, w, lams, bases)
    p = X.shape[1]
    return GamModel(
        intercept=fit.intercept,
        terms=fit.smooths[:p],
        predictors=tuple(predictors),
        tensor=fit.smooths[p] if coords is not None else None,
        gcv=fit.gcv,
        edf=fit.edf,
        r2=_weighted_r2(y, fit.fitted, fit.weights),
        n=fit.n_eff,
        lam_main=float(lam_main),
        lam_tensor=float(lam_tensor) if coords is not None else None,
        n_splines=int(n_splines),
        rss=fit.rss,
        intercept_var=fit.intercept_var,
    )


class _Cell:
    """Adapter so ``grid_search`` can score a GamModel like a PlsFit."""

    def __init__(self, model: GamModel):
        self.model = model
        self.edf, self.n_eff, self.rss = model.edf, model.n, model.rss


def select_gam(X, y, predictors, coords=None, weights=None, lambdas=LAMBDA_GRID,
               tensor_lambdas=LAMBDA_GRID, n_splines=N_SPLINES_GRID, tensor_n_splines: int = 5):
    """GCV grid search. Cells are visited in tie-break order (smaller main
    lambda, then smaller tensor lambda, then fewer splines) and the first
    strict minimum wins. Returns ``(model, scores)``."""
    t_lams = sorted(tensor_lambdas) if coords is not None else [None]
    cells = [(lm, lt, ns) for lm in sorted(lambdas) for lt in t_lams for ns in sorted(n_splines)]

    def fit_cell(c):
        lm, lt, ns = c
        return _Cell(fit_gam(X, y, predictors, coords, weights, lm, lt if lt is not None else 1.0,
                             ns, tensor_n_splines))

    _, best, scores = grid_search(fit_cell, cells)
    return best.model, scores


def fit_global_gam(aggregates, predictors: Sequence[str], outcome: str, grids: Mapping | None = None,
                   spatial: bool = True) -> GamModel:
    """District-level GAM: a smooth per predictor plus a tensor smooth over the
    centroid coordinates, smoothing chosen by GCV."""
    grids = dict(grids or {})
    L = len(aggregates)
    if L < MIN_DISTRICTS:
        raise DataError(f"global GAM needs at least {MIN_DISTRICTS} districts, got {L}")
    aggs = sorted(aggregates, key=lambda a: a.district_id)
    X = np.array([[a.feature(p) for p in predictors] for a in aggs], dtype=float).reshape(L, -1)
    y = np.array([a.outcome(outcome) for a in aggs], dtype=float)
    coords = np.array([a.centroid for a in aggs], dtype=float) if spatial else None
    ns_grid = sorted(grids.get("n_splines", N_SPLINES_GRID))
    t_ns = int(grids.get("tensor_n_splines", 5))
    if L < RECOMMENDED_DISTRICTS:
        cap = max(4, L // 2)
        reduced = [ns for ns in ns_grid if ns <= cap] or [4]
        t_ns = min(t_ns, max(4, int(math.sqrt(L))))
        warnings.warn(f"only {L} districts; spline bases reduced to n_splines in {reduced}, "
                      f"tensor margins {t_ns}", stacklevel=2)
        ns_grid = reduced
    model, _ = select_gam(X, y, predictors, coords, None, grids.get("lambdas", LAMBDA_GRID),
                          grids.get("tensor_lambdas", LAMBDA_GRID), ns_grid, t_ns)
    return model


# ---------------------------------------------------------------------------
# local GAMs

def exp_decay_weights(centroids, target: int, theta: float) -> np.ndarray:
    """``w_l = exp(-d(target, l) / theta)``."""
    if not (theta > 0):
        raise ConfigError(f"theta must be > 0, got {theta}")
    c = np.asarray(centroids, dtype=float)
    d = np.sqrt(np.sum((c - c[target]) ** 2, axis=1))
    if math.isinf(theta):
        return np.ones(len(c))
    return np.exp(-d / theta)


def default_theta(centroids) -> float:
    """Three times the median nearest-neighbour distance between centroids."""
    c = np.asarray(centroids, dtype=float)
    if len(c) < 2:
        return 1.0
    d, _ = cKDTree(c).query(c, k=2)
    med = float(np.median(d[:, 1]))
    return 3.0 * med if med > 0 else 1.0


@dataclass
class LocalGamSet:
    models: dict[str, GamModel | None]
    flags: dict[str, str]
    theta: float | None
    spatial_smoothing: bool
    predictors: tuple[str, ...]
    weighting: str = "district-granular exp(-d/theta)"
    regions: dict[str, int] = field(default_factory=dict)

    @property
    def districts(self) -> list[str]:
        return sorted(self.models)

    def summary(self) -> dict:
        out = {}
        for dist in self.districts:
            m = self.models[dist]
            out[dist] = m.summary() if m is not None else {"flag": self.flags.get(dist, "no model")}
            if dist in self.regions:
                out[dist]["region"] = int(self.regions[dist])
        return out


def fit_local_gams(d, predictors: Sequence[str], outcome: str, theta: float | None = None,
                   spatial_smoothing: bool = True, lambdas=LAMBDA_GRID,
                   n_splines=N_SPLINES_GRID, regions: Mapping[str, int] | None = None,
                   n_jobs: int | None = None) -> LocalGamSet:
    """One GAM per district on row-level data.

    With spatial smoothing every row carries its district's weight
    ``exp(-d/theta)`` relative to the target district; without it only the
    district's own rows are used. Districts with fewer than
    ``min(n_splines) + 5`` supporting rows are flagged and get no model.
    """
    from .datastore import aggregate_by_district

    aggs = aggregate_by_district(d)
    names = [a.district_id for a in aggs]
    cents = np.array([a.centroid for a in aggs])
    if spatial_smoothing:
        theta = default_theta(cents) if theta is None else float(theta)
        if not theta > 0:
            raise ConfigError(f"theta must be > 0, got {theta}")
    X = d.feature_matrix(list(predictors))
    y = np.asarray(d.outcome(outcome), dtype=float)
    row_district = np.searchsorted(np.array(names, dtype=object), d.district_id)
    min_rows = min(n_splines) + 5

    def fit_one(t: int):
        if spatial_smoothing:
            wd = exp_decay_weights(cents, t, theta)
            wd[wd < WEIGHT_FLOOR] = 0.0
        else:
            wd = np.zeros(len(names))
            wd[t] = 1.0
        w = wd[row_district]
        rows = w > 0
        if rows.sum() < min_rows:
            return None, f"{int(rows.sum())} supporting rows < {min_rows}"
        try:
            m, _ = select_gam(X[rows], y[rows], predictors, None, w[rows], lambdas, (), n_splines)
        except (KnotDegeneracyError, DataError, ArithmeticError) as exc:
            return None, f"fit failed: {exc}"
        return m, None

    results = parallel_map(fit_one, range(len(names)), n_jobs)
    models, flags = {}, {}
    for name, (m, flag) in zip(names, results):
        models[name] = m
        if flag:
            flags[name] = flag
            logger.warning("district %s flagged: %s", name, flag)
    return LocalGamSet(models, flags, theta if spatial_smoothing else None, spatial_smoothing,
                       tuple(predictors),
                       "district-granular exp(-d/theta)" if spatial_smoothing else "own district only",
                       dict(regions or {}))


# ---------------------------------------------------------------------------
# shape reporting

def shape_grid(x, n_grid: int = 100, lo_q: float = 0.01, hi_q: float = 0.99) -> np.ndarray:
    lo, hi = np.quantile(np.asarray(x, dtype=float), [lo_q, hi_q])
    return np.linspace(lo, hi, n_grid)


def sign_summary(model: GamModel, predictor: str, grid, level: float = 0.95) -> dict:
    """Fractions of the grid where the slope's CI lies wholly above or below
    zero; ``signed = positive - negative``.

    The slope is used because a centred shape function always crosses zero,
    so its own band says little about direction.
    """
    _, lo, hi = model.shape(predictor, grid, level, deriv=1)
    pos = float(np.mean(lo > 0))
    neg = float(np.mean(hi < 0))
    return {"positive": pos, "negative": neg, "signed": pos - neg}


def shape_report(models: Mapping[str, GamModel | None], predictor: str, grid,
                 level: float = 0.95) -> tuple[pd.DataFrame, dict]:
    """Per-district curves on a common grid plus the sign summary."""
    frames, signs = [], {}
    for dist in sorted(models):
        m = models[dist]
        if m is None:
            continue
        est, lo, hi = m.shape(predictor, grid, level)
        frames.append(pd.DataFrame({"district": dist, "grid_value": grid, "estimate": est,
                                    "lower": lo, "upper": hi, "edf": m.term(predictor).edf}))
        signs[dist] = sign_summary(m, predictor, grid, level)
    cols = ["district", "grid_value", "estimate", "lower", "upper", "edf"]
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=cols)
    return table, signs


def global_shape_table(model: GamModel, data: Mapping[str, np.ndarray], n_grid: int = 100,
                       level: float = 0.95) -> pd.DataFrame:
    """Shape functions of every predictor, each on its 1-99% quantile grid."""
    frames = []
    for name in model.predictors:
        grid = shape_grid(data[name], n_grid)
        est, lo, hi = model.shape(name, grid, level)
        frames.append(pd.DataFrame({"term": name, "grid_value": grid, "estimate": est,
                                    "lower": lo, "upper": hi, "edf": model.term(name).edf}))
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=SHAPE_COLUMNS)


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
