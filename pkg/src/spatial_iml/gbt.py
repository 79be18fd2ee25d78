"""Least-squares gradient-boosted regression trees.

Exact greedy splits, row subsampling, randomized hyperparameter search with
district-stratified CV, and Rashomon-set sampling by rejection.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import ConfigError

logger = logging.getLogger(__name__)

SEARCH_SPACE = {
    "n_estimators": (100, 200, 300, 400, 500, 600),
    "max_depth": (2, 3, 4, 5, 6, 7, 8),
    "learning_rate": (0.01, 0.03, 0.1, 0.3),
    "subsample": (0.7, 1.0),
    "min_samples_leaf": (5, 20, 50),
}


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("SPATIAL_IML_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn: Callable, items: Iterable, n_jobs: int | None = None) -> list:
    """Ordered map; threads help because the kernels release the GIL."""
    items = list(items)
    n_jobs = default_threads() if n_jobs is None else n_jobs
    if n_jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, items))


def r2_score(y, pred) -> float:
    y = np.asarray(y, dtype=float)
    sse = float(np.sum((y - pred) ** 2))
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        return 1.0 if sse == 0.0 else 0.0
    return 1.0 - sse / sst


@dataclass(frozen=True)
class Hyperparams:
    n_estimators: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    subsample: float = 1.0
    min_samples_leaf: int = 5
    cv_score: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.n_estimators < 0 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ConfigError(f"invalid tree hyperparameters: {self}")
        if not 0 < self.learning_rate <= 1 or not 0 < self.subsample <= 1:
            raise ConfigError("learning_rate and subsample must lie in (0, 1]")

    def as_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "cv_score"}


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray
    gain: np.ndarray

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            a = np.asarray(getattr(self, name))
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=float),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=float),
            cover=np.asarray(d["cover"], dtype=np.int64),
            gain=np.asarray(d["gain"], dtype=float),
        )

    def partitions(self, X: np.ndarray) -> list[tuple[int, frozenset]]:
        """(feature, rows sent left) for every internal node, in node order."""
        out = []
        rows_at = {0: np.arange(X.shape[0])}
        for k in range(self.n_nodes):
            rows = rows_at.get(k, np.arange(0))
            f = self.feature[k]
            if f < 0:
                continue
            go_left = X[rows, f] < self.threshold[k]
            rows_at[self.left[k]] = rows[go_left]
            rows_at[self.right[k]] = rows[~go_left]
            out.append((int(f), frozenset(rows[go_left].tolist())))
        return out


@dataclass(frozen=True)
class GbtModel:
    """``prediction(x) = base_score + learning_rate * sum_t tree_t(x)``."""

    trees: tuple[Tree, ...]
    learning_rate: float
    base_score: float
    hyperparams: Hyperparams
    seed: int
    n_features: int
    val_r2: float | None = None
    train_sse: tuple[float, ...] = ()

    @cached_property
    def _packed(self):
        if not self.trees:
            return None
        sizes = [t.n_nodes for t in self.trees]
        offsets = np.zeros(len(sizes) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum(sizes)
        cat = lambda name, dt: np.concatenate([getattr(t, name) for t in self.trees]).astype(dt)
        return (cat("feature", np.int64), cat("threshold", float), cat("left", np.int64),
                cat("right", np.int64), cat("value", float), offsets, max(sizes))

    def _check(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected a 2-D matrix with {self.n_features} columns, got shape {X.shape}")
        return X

    def predict(self, X) -> np.ndarray:
        X = self._check(X)
        if self._packed is None:
            return np.full(X.shape[0], self.base_score)
        f, t, l, r, v, off, _ = self._packed
        return self.base_score + self.learning_rate * _kernels.predict_packed(X, f, t, l, r, v, off)

    def feature_gain(self) -> np.ndarray:
        """Total squared-error reduction attributed to each feature."""
        out = np.zeros(self.n_features)
        for tree in self.trees:
            internal = tree.feature >= 0
            np.add.at(out, tree.feature[internal], tree.gain[internal])
        return out

    def used_features(self) -> set[int]:
        return {int(f) for t in self.trees for f in t.feature if f >= 0}

    def to_dict(self) -> dict:
        return {
            "kind": "gbt_model",
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "hyperparams": self.hyperparams.as_dict(),
            "seed": self.seed,
            "n_features": self.n_features,
            "val_r2": self.val_r2,
            "train_sse": list(self.train_sse),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbtModel":
        return cls(
            trees=tuple(Tree.from_dict(t) for t in d["trees"]),
            learning_rate=d["learning_rate"],
            base_score=d["base_score"],
            hyperparams=Hyperparams(**d["hyperparams"]),
            seed=d["seed"],
            n_features=d["n_features"],
            val_r2=d.get("val_r2"),
            train_sse=tuple(d.get("train_sse", ())),
        )


def fit_gbt(X, y, hp: Hyperparams | None = None, seed: int = 0) -> GbtModel:
    """Boost squared-error trees from a mean base score.

    Deterministic in ``(X, y, hp, seed)``; the seed only drives row
    subsampling. A constant ``y`` returns a zero-tree model.
    """
    hp = hp or Hyperparams()
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if len(y) != n:
        raise ValueError("X and y row counts differ")
    if n < 2 * hp.min_samples_leaf:
        raise ConfigError(f"need n >= 2*min_samples_leaf ({2 * hp.min_samples_leaf}), got n={n}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ConfigError("fit_gbt does not accept missing or non-finite values")

    base = float(y.mean())
    if np.all(y == y[0]):
        return GbtModel((), hp.learning_rate, float(y[0]), hp, seed, p, train_sse=())

    order = np.empty((p, n), dtype=np.int64)
    for f in range(p):
        order[f] = np.argsort(X[:, f], kind="stable")
    rng = np.random.default_rng(seed)
    n_sub = min(n, max(2 * hp.min_samples_leaf, int(round(hp.subsample * n))))
    pred = np.full(n, base)
    trees = []
    sse = []
    offsets = np.array([0, 0], dtype=np.int64)
    for _ in range(hp.n_estimators):
        if n_sub < n:
            mask = np.zeros(n, dtype=np.bool_)
            mask[rng.choice(n, n_sub, replace=False)] = True
        else:
            mask = np.ones(n, dtype=np.bool_)
        resid = y - pred
        f, t, l, r, v, c, g = _kernels.build_tree(X, order, resid, mask, hp.max_depth,
                                                  hp.min_samples_leaf)
        if len(f) == 1:
            # no admissible split: a single-leaf tree still shifts by the mean residual
            if abs(v[0]) <= 1e-15 * (1.0 + abs(base)):
                sse.append(float(resid @ resid))
                continue
        tree = Tree(f, t, l, r, v, c, g)
        trees.append(tree)
        offsets[1] = len(f)
        pred = pred + hp.learning_rate * _kernels.predict_packed(X, f, t, l, r, v, offsets)
        sse.append(float(np.sum((y - pred) ** 2)))
    return GbtModel(tuple(trees), hp.learning_rate, base, hp, seed, p, train_sse=tuple(sse))


# ---------------------------------------------------------------------------
# data splitting

def stratified_folds(groups, k: int, seed: int) -> np.ndarray:
    """Fold id per row such that every group is spread evenly over folds.

    Rows of each group are shuffled and dealt round-robin; the dealing offset
    carries over between groups so fold sizes differ by at most one.
    """
    groups = np.asarray(groups)
    if k < 2:
        raise ConfigError("need at least 2 folds")
    rng = np.random.default_rng(seed)
    folds = np.empty(len(groups), dtype=np.int64)
    offset = 0
    for g in np.unique(groups):
        rows = rng.permutation(np.flatnonzero(groups == g))
        folds[rows] = (offset + np.arange(len(rows))) % k
        offset = (offset + len(rows)) % k
    return folds


def holdout_split(groups, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """District-proportional (train, test) index split with ~``frac`` test rows."""
    if not 0 < frac < 1:
        raise ConfigError("holdout fraction must lie in (0, 1)")
    k = max(2, int(round(1.0 / frac)))
    folds = stratified_folds(groups, k, seed)
    return np.flatnonzero(folds != 0), np.flatnonzero(folds == 0)


def cv_r2(X, y, hp: Hyperparams, folds: np.ndarray, seed: int = 0) -> float:
    """Mean per-fold R2."""
    scores = []
    for f in np.unique(folds):
        tr, te = folds != f, folds == f
        m = fit_gbt(X[tr], y[tr], hp, seed)
        scores.append(r2_score(y[te], m.predict(X[te])))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# hyperparameter search

def _grid(space: dict) -> list[Hyperparams]:
    keys = list(space)
    return [Hyperparams(**dict(zip(keys, vals))) for vals in itertools.product(*space.values())]


def tune_hyperparams(d, outcome: str, budget: int, seed: int, *, space: dict | None = None,
                     n_folds: int = 5, test_frac: float = 0.1, include_default: bool = True,
                     n_jobs: int | None = None, return_trials: bool = False):
    """Randomized search maximizing mean district-stratified CV R2.

    A district-proportional ``test_frac`` of rows is held out before CV.
    ``include_default`` guarantees ``Hyperparams()`` is among the candidates
    whenever it lies in the search space. The returned hyperparameters carry
    their CV score in ``cv_score``.
    """
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    if len(set(d.district_id.tolist())) < n_folds:
        raise ConfigError(f"tuning needs at least {n_folds} districts")
    space = dict(space or SEARCH_SPACE)
    grid = _grid(space)
    if budget > len(grid):
        warnings.warn(f"budget {budget} exceeds the {len(grid)}-point grid; truncated", stacklevel=2)
        budget = len(grid)
    rng = np.random.default_rng(seed)
    picks = [grid[i] for i in rng.choice(len(grid), budget, replace=False)]
    default = Hyperparams()
    if include_default and default in grid and default not in picks:
        picks[-1] = default

    X = np.asarray(d.features)
    y = np.asarray(d.outcome(outcome))
    train, _ = holdout_split(d.district_id, test_frac, seed)
    folds = stratified_folds(d.district_id[train], n_folds, seed + 1)
    scores = parallel_map(lambda hp: cv_r2(X[train], y[train], hp, folds, seed), picks, n_jobs)
    best = int(np.argmax(scores))
    for hp, s in zip(picks, scores):
        logger.debug("candidate %s cv_r2=%.4f", hp.as_dict(), s)
    out = replace(picks[best], cv_score=float(scores[best]))
    if return_trials:
        return out, [(hp.as_dict(), float(s)) for hp, s in zip(picks, scores)]
    return out


# ---------------------------------------------------------------------------
# Rashomon sampling

@dataclass(frozen=True)
class RashomonEnsemble:
    models: tuple[GbtModel, ...]
    acceptance_threshold: float
    rejected_count: int
    attempts: int
    complete: bool
    train_idx: np.ndarray
    val_idx: np.ndarray
    epsilon: float

    @property
    def best_val_r2(self) -> float:
        return max(m.val_r2 for m in self.models)

    def to_dict(self) -> dict:
        return {
            "kind": "rashomon_ensemble",
            "acceptance_threshold": self.acceptance_threshold,
            "rejected_count": self.rejected_count,
            "attempts": self.attempts,
            "complete": self.complete,
            "epsilon": self.epsilon if math.isfinite(self.epsilon) else "inf",
            "train_idx": self.train_idx.tolist(),
            "val_idx": self.val_idx.tolist(),
            "models": [m.to_dict() for m in self.models],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "RashomonEnsemble":
        eps = d["epsilon"]
        return cls(
            models=tuple(GbtModel.from_dict(m) for m in d["models"]),
            acceptance_threshold=d["acceptance_threshold"],
            rejected_count=d["rejected_count"],
            attempts=d["attempts"],
            complete=d["complete"],
            train_idx=np.asarray(d["train_idx"], dtype=np.int64),
            val_idx=np.asarray(d["val_idx"], dtype=np.int64),
            epsilon=math.inf if eps == "inf" else float(eps),
        )


def rashomon_filter(scores: Sequence[float], k: int, eps: float):
    """Seed-ordered accept/evict reduction.

    Returns ``(accepted positions, threshold, rejected_count, consumed)``;
    ``consumed`` is how many scores were looked at before ``k`` were held.
    """
    accepted: list[int] = []
    best = -math.inf
    rejected = 0
    consumed = 0
    for pos, s in enumerate(scores):
        consumed = pos + 1
        if s > best:
            best = s
            keep = [a for a in accepted if scores[a] >= best - eps]
            rejected += len(accepted) - len(keep)
            accepted = keep
        if s >= best - eps:
            accepted.append(pos)
        else:
            rejected += 1
        if len(accepted) == k:
            break
    return accepted, best - eps, rejected, consumed


def sample_rashomon(d, outcome: str, hp: Hyperparams, k: int = 50, eps: float = 0.01,
                    max_attempts: int | None = None, *, val_frac: float = 0.2,
                    split_seed: int = 0, diversify_subsample: float | None = 0.8,
                    n_jobs: int | None = None) -> RashomonEnsemble:
    """Fit models with seeds 0, 1, 2, ... and keep those within ``eps`` of the
    best validation R2 seen so far.

    A model accepted early is evicted if a later seed raises the best score
    past its reach. With ``hp.subsample == 1`` every seed would produce the
    same trees, so members then subsample rows at ``diversify_subsample``
    (pass ``None`` to disable).
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    if not eps >= 0:
        raise ConfigError("eps must be >= 0")
    max_attempts = max_attempts or 4 * k
    member_hp = hp
    if diversify_subsample is not None and hp.subsample >= 1.0:
        member_hp = replace(hp, subsample=diversify_subsample)
    X = np.asarray(d.features)
    y = np.asarray(d.outcome(outcome))
    train, val = holdout_split(d.district_id, val_frac, split_seed)

    def fit_one(seed: int) -> GbtModel:
        m = fit_gbt(X[train], y[train], member_hp, seed)
        return replace(m, val_r2=r2_score(y[val], m.predict(X[val])))

    n_jobs = default_threads() if n_jobs is None else n_jobs
    batch = max(k, n_jobs)
    models: list[GbtModel] = []
    accepted: list[int] = []
    thr, rejected, consumed = -math.inf, 0, 0
    while len(models) < max_attempts:
        seeds = range(len(models), min(max_attempts, len(models) + batch))
        models.extend(parallel_map(fit_one, seeds, n_jobs))
        accepted, thr, rejected, consumed = rashomon_filter([m.val_r2 for m in models], k, eps)
        if len(accepted) == k:
            break
    complete = len(accepted) == k
    if not complete:
        warnings.warn(f"only {len(accepted)} of {k} models accepted after {consumed} attempts",
                      stacklevel=2)
    return RashomonEnsemble(
        models=tuple(models[i] for i in accepted),
        acceptance_threshold=thr,
        rejected_count=rejected,
        attempts=consumed,
        complete=complete,
        train_idx=train,
        val_idx=val,
        epsilon=eps,
    )


def predict(m: GbtModel, X) -> np.ndarray:
    return m.predict(X)
