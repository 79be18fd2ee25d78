"""Variable importance over a Rashomon ensemble.

Four metrics (permutation, interventional tree SHAP, LOCO, conditional model
reliance), ensemble averaging, mean-rank aggregation and correlation pruning.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import rankdata

from . import _kernels
from .errors import ConfigError, DataError
from .gbt import GbtModel, Hyperparams, fit_gbt, r2_score

logger = logging.getLogger(__name__)

METRICS = ("permutation", "shap", "loco", "cmr")
REPORT_COLUMNS = ["feature", "perm_score", "perm_rank", "shap_score", "shap_rank", "loco_score",
                  "loco_rank", "cmr_score", "cmr_rank", "mean_rank", "kept_after_pruning"]
_SHORT = {"permutation": "perm", "shap": "shap", "loco": "loco", "cmr": "cmr"}


# ---------------------------------------------------------------------------
# rank tables

def rank_descending(scores) -> np.ndarray:
    """1 = largest score; ties share their average rank; NaN ranks last."""
    s = np.asarray(scores, dtype=float)
    s = np.where(np.isnan(s), -np.inf, s)
    return rankdata(-s, method="average")


def _top_k(features: Sequence[str], mean_rank: np.ndarray, k: int) -> tuple[str, ...]:
    order = sorted(range(len(features)), key=lambda j: (mean_rank[j], features[j]))
    return tuple(features[j] for j in order[:k])


@dataclass(frozen=True)
class RankTable:
    features: tuple[str, ...]
    scores: Mapping[str, np.ndarray]
    ranks: Mapping[str, np.ndarray]
    mean_rank: np.ndarray
    top_k: tuple[str, ...]

    @classmethod
    def from_scores(cls, features: Sequence[str], scores: Mapping[str, Sequence[float]],
                    k: int = 10) -> "RankTable":
        features = tuple(features)
        scores = {m: np.asarray(v, dtype=float) for m, v in scores.items()}
        ranks = {m: rank_descending(v) for m, v in scores.items()}
        return cls._assemble(features, scores, ranks, k)

    @classmethod
    def from_ranks(cls, features: Sequence[str], ranks: Mapping[str, Sequence[float]],
                   k: int = 10) -> "RankTable":
        """Table from externally supplied ranks (scores are left as NaN)."""
        features = tuple(features)
        ranks = {m: np.asarray(v, dtype=float) for m, v in ranks.items()}
        scores = {m: np.full(len(features), np.nan) for m in ranks}
        return cls._assemble(features, scores, ranks, k)

    @classmethod
    def _assemble(cls, features, scores, ranks, k):
        for m, v in ranks.items():
            if len(v) != len(features):
                raise ValueError(f"metric {m!r} has {len(v)} entries for {len(features)} features")
        R = np.vstack([ranks[m] for m in ranks]) if ranks else np.zeros((0, len(features)))
        mean_rank = R.mean(axis=0) if len(R) else np.zeros(len(features))
        return cls(features, scores, ranks, mean_rank, _top_k(features, mean_rank, k))

    @property
    def ordered(self) -> list[str]:
        return list(_top_k(self.features, self.mean_rank, len(self.features)))

    def to_frame(self, kept: Sequence[str] | None = None) -> pd.DataFrame:
        rows = {"feature": list(self.features)}
        for m in METRICS:
            short = _SHORT[m]
            rows[f"{short}_score"] = self.scores.get(m, np.full(len(self.features), np.nan))
            rows[f"{short}_rank"] = self.ranks.get(m, np.full(len(self.features), np.nan))
        rows["mean_rank"] = self.mean_rank
        kept = set(self.top_k if kept is None else kept)
        rows["kept_after_pruning"] = [f in kept for f in self.features]
        df = pd.DataFrame(rows)[REPORT_COLUMNS]
        order = {f: i for i, f in enumerate(self.ordered)}
        return df.sort_values("feature", key=lambda s: s.map(order)).reset_index(drop=True)


def aggregate_ranks(tables: Sequence[RankTable], k: int = 10) -> RankTable:
    """Average each metric's scores over models, then rank, then mean rank.

    Sums use ``math.fsum`` so the result does not depend on model order; NaN
    entries (a metric not computed for some model) are skipped.
    """
    if not tables:
        raise ConfigError("aggregate_ranks needs at least one table")
    ref = tables[0].features
    for t in tables[1:]:
        if set(t.features) != set(ref):
            diff = sorted(set(t.features) ^ set(ref))
            raise DataError(f"rank tables disagree on features: {diff}")
    metrics = [m for m in METRICS if any(m in t.scores for t in tables)]
    metrics += sorted({m for t in tables for m in t.scores} - set(metrics))
    avg = {}
    for m in metrics:
        vals = np.full(len(ref), np.nan)
        for j, f in enumerate(ref):
            xs = []
            for t in tables:
                if m in t.scores:
                    v = t.scores[m][t.features.index(f)]
                    if not np.isnan(v):
                        xs.append(float(v))
            if xs:
                vals[j] = math.fsum(xs) / len(xs)
        avg[m] = vals
    if len(tables) == 1 and all(np.all(np.isnan(tables[0].scores[m])) for m in metrics):
        return tables[0]
    return RankTable.from_scores(ref, avg, k)


def prune_correlated(d, ranked: Sequence[str], threshold: float = 0.8) -> list[str]:
    """Greedy scan in rank order; drop a feature whose |Pearson r| with any
    already-kept feature exceeds ``threshold``."""
    if not 0 < threshold < 1:
        raise ConfigError("threshold must lie in (0, 1)")
    X = d.feature_matrix(list(ranked)) if hasattr(d, "feature_matrix") else np.asarray(d)
    with np.errstate(invalid="ignore", divide="ignore"):
        C = np.corrcoef(X, rowvar=False).reshape(len(ranked), len(ranked))
    C = np.nan_to_num(C, nan=0.0)
    kept: list[int] = []
    for j in range(len(ranked)):
        if all(abs(C[j, i]) <= threshold for i in kept):
            kept.append(j)
        else:
            logger.info("pruned %s (|r| > %.2f with a higher-ranked feature)", ranked[j], threshold)
    return [ranked[j] for j in kept]


# ---------------------------------------------------------------------------
# metrics

def permutation_importance(model, X, y, repeats: int = 10, seed: int = 0) -> np.ndarray:
    """``I_j = s - s_perm(j)`` with R2 scores, averaged over shuffles."""
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    rng = np.random.default_rng(seed)
    base = r2_score(y, model.predict(X))
    out = np.zeros(X.shape[1])
    for j in range(X.shape[1]):
        drops = []
        for _ in range(repeats):
            Xp = X.copy()
            Xp[:, j] = rng.permutation(X[:, j])
            drops.append(base - r2_score(y, model.predict(Xp)))
        out[j] = np.mean(drops)
    return out


def _shapley_weights(depth: int) -> np.ndarray:
    # w[a, b] = a! b! / (a + b + 1)!
    w = np.zeros((depth + 1, depth + 1))
    for a in range(depth + 1):
        for b in range(depth + 1):
            w[a, b] = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 1)
    return w


def shap_values(model: GbtModel, X, background=None, max_background: int = 512,
                seed: int = 0) -> tuple[np.ndarray, float]:
    """Exact interventional Shapley values of a boosted tree model.

    The value of a coalition S at row x is the mean prediction over background
    rows z with the S-columns taken from x and the rest from z. Returns the
    ``n x p`` attributions and the base value (mean background prediction),
    so that ``base + phi.sum(1) == model.predict(X)``.
    """
    X = model._check(X)
    Z = X if background is None else model._check(background)
    if len(Z) == 0:
        raise ConfigError("background sample is empty")
    if len(Z) > max_background:
        Z = Z[np.sort(np.random.default_rng(seed).choice(len(Z), max_background, replace=False))]
    if not model.trees:
        return np.zeros(X.shape), float(model.base_score)
    f, t, l, r, v, off, max_nodes = model._packed
    weights = _shapley_weights(model.hyperparams.max_depth + 1)
    phi = _kernels.shap_packed(X, np.ascontiguousarray(Z), f, t, l, r, v, off, weights, max_nodes)
    base = float(np.mean(model.predict(Z)))
    return model.learning_rate * phi, base


def shap_importance(model: GbtModel, X, background=None, max_background: int = 512,
                    seed: int = 0) -> np.ndarray:
    phi, _ = shap_values(model, X, background, max_background, seed)
    return np.abs(phi).mean(axis=0)


def loco_importance(X, y, hp: Hyperparams, seed: int, folds, groups=None) -> np.ndarray:
    """``I_j = s - s_{-j}`` with pooled out-of-fold R2 on shared folds.

    Refits use the same hyperparameters and seed. ``groups`` optionally lists
    column-index tuples to drop jointly (default: one column at a time).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    folds = np.asarray(folds)
    p = X.shape[1]
    groups = [(j,) for j in range(p)] if groups is None else [tuple(g) for g in groups]

    def oof_r2(cols: list[int]) -> float:
        pred = np.empty(len(y))
        for f in np.unique(folds):
            tr, te = folds != f, folds == f
            if cols:
                m = fit_gbt(X[tr][:, cols], y[tr], hp, seed)
                pred[te] = m.predict(X[te][:, cols])
            else:
                pred[te] = y[tr].mean()
        return r2_score(y, pred)

    s = oof_r2(list(range(p)))
    return np.array([s - oof_r2([c for c in range(p) if c not in g]) for g in groups])


def conditional_imputer(X, ridge: float = 0.0):
    """Per-column Gaussian regression of ``x_j`` on the other columns.

    Returns ``(means, coefs, ridge_used)``; ``coefs[j]`` has length ``p - 1``.
    A ridge is added only if a conditional system is not positive definite.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    mu = X.mean(axis=0)
    C = np.cov(X, rowvar=False).reshape(p, p)
    coefs = []
    used = ridge
    for j in range(p):
        rest = [k for k in range(p) if k != j]
        if not rest:
            coefs.append(np.zeros(0))
            continue
        A = C[np.ix_(rest, rest)]
        b = C[rest, j]
        lam = ridge
        while True:
            try:
                fac = cho_factor(A + lam * np.eye(len(rest)))
                if np.min(np.abs(np.diag(fac[0]))) ** 2 < 1e-12 * np.max(np.diag(A)):
                    raise LinAlgError("near singular")
                coefs.append(cho_solve(fac, b))
                break
            except LinAlgError:
                lam = 1e-8 * max(np.trace(A) / len(rest), 1e-12) if lam == 0 else lam * 10
        if lam > used:
            used = lam
            logger.info("conditional system for column %d ridge-stabilized (%.3g)", j, lam)
    return mu, coefs, used


def cmr_importance(model, X, y, seed: int = 0, repeats: int = 10,
                   return_ridge: bool = False):
    """Conditional model reliance: ``I_j = s - s_impute(j)``.

    Column j is replaced by its conditional-Gaussian mean given the others
    plus a random permutation of the empirical residuals; the model is not
    refit.
    """
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    p = X.shape[1]
    mu, coefs, ridge = conditional_imputer(X)
    rng = np.random.default_rng(seed)
    base = r2_score(y, model.predict(X))
    out = np.zeros(p)
    for j in range(p):
        rest = [k for k in range(p) if k != j]
        cond = mu[j] + (X[:, rest] - mu[rest]) @ coefs[j]
        resid = X[:, j] - cond
        drops = []
        for _ in range(repeats):
            Xi = X.copy()
            Xi[:, j] = cond + rng.permutation(resid)
            drops.append(base - r2_score(y, model.predict(Xi)))
        out[j] = np.mean(drops)
    return (out, ridge) if return_ridge else out


# ---------------------------------------------------------------------------
# ensemble driver

def model_rank_table(model: GbtModel, names, X_eval, y_eval, background, *, seed: int = 0,
                     repeats: int = 10, max_background: int = 512, max_explain: int | None = None,
                     loco_scores=None, k: int = 10) -> RankTable:
    """Permutation, SHAP and CMR scores for one model (LOCO passed in)."""
    X_explain = X_eval
    if max_explain is not None and len(X_eval) > max_explain:
        rows = np.sort(np.random.default_rng(seed).choice(len(X_eval), max_explain, replace=False))
        X_explain = X_eval[rows]
    scores = {
        "permutation": permutation_importance(model, X_eval, y_eval, repeats, seed),
        "shap": shap_importance(model, X_explain, background, max_background, seed),
        "loco": np.full(len(names), np.nan) if loco_scores is None else loco_scores,
        "cmr": cmr_importance(model, X_eval, y_eval, seed, repeats),
    }
    return RankTable.from_scores(names, scores, k)


def ensemble_importance(ensemble, X, y, names, groups, *, loco_members: int | None = None,
                        loco_folds: int = 5, repeats: int = 10, max_background: int = 512,
                        max_explain: int | None = None, k: int = 10, seed: int = 0):
    """Per-model rank tables over a Rashomon ensemble and their aggregate.

    Permutation/SHAP/CMR are scored on the ensemble's validation rows (SHAP
    background drawn from its training rows). LOCO refits on the training rows
    with district-stratified folds, for the first ``loco_members`` members.
    """
    from .gbt import stratified_folds

    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    tr, va = ensemble.train_idx, ensemble.val_idx
    folds = stratified_folds(np.asarray(groups)[tr], loco_folds, seed)
    n_loco = len(ensemble.models) if loco_members is None else min(loco_members, len(ensemble.models))
    tables = []
    for i, m in enumerate(ensemble.models):
        loco = None
        if i < n_loco:
            loco = loco_importance(X[tr], y[tr], m.hyperparams, m.seed, folds)
        tables.append(model_rank_table(m, names, X[va], y[va], X[tr], seed=seed + i,
                                       repeats=repeats, max_background=max_background,
                                       max_explain=max_explain, loco_scores=loco, k=k))
    return tables, aggregate_ranks(tables, k)
