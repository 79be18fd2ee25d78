"""Second-order model-X Gaussian knockoffs and the knockoff(+) filter."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LassoCV
from sklearn.model_selection import KFold

from .errors import ConfigError, NumericalError
from .gbt import Hyperparams, fit_gbt, stratified_folds, cv_r2

logger = logging.getLogger(__name__)

SHRINKAGE_LEVELS = (0.01, 0.05, 0.1, 0.2, 0.5)
STATISTICS = ("gbt-gain", "lasso")
GAIN_HP = Hyperparams(n_estimators=100, max_depth=3, learning_rate=0.1, subsample=0.8,
                      min_samples_leaf=5)


def estimate_covariance(X, min_eig: float = 1e-6) -> tuple[np.ndarray, float]:
    """Correlation matrix of ``X`` with linear shrinkage toward the identity.

    Shrinkage is applied when ``p/n > 0.1`` or the sample matrix is
    near-singular, using the smallest level in ``SHRINKAGE_LEVELS`` that lifts
    the smallest eigenvalue to ``min_eig``.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    C = np.corrcoef(X, rowvar=False).reshape(p, p)
    if not np.all(np.isfinite(C)):
        raise NumericalError("covariance estimate is not finite (constant column?)")
    lam = np.linalg.eigvalsh(C)[0]
    if p / n <= 0.1 and lam >= min_eig:
        return C, 0.0
    for a in SHRINKAGE_LEVELS:
        S = (1 - a) * C + a * np.eye(p)
        if np.linalg.eigvalsh(S)[0] >= min_eig:
            return S, a
    raise NumericalError("covariance not positive definite after maximal shrinkage")


def equicorrelated_s(Sigma: np.ndarray) -> np.ndarray:
    lam = float(np.linalg.eigvalsh(Sigma)[0])
    return np.full(Sigma.shape[0], min(2.0 * lam, 1.0))


@dataclass(frozen=True)
class KnockoffDraw:
    X_tilde: np.ndarray
    s: np.ndarray
    Sigma: np.ndarray
    shrinkage: float
    max_deviation: float


def joint_cov_deviation(X, X_tilde, Sigma, s) -> float:
    """Max-abs gap between the empirical covariance of ``[X, X_tilde]`` and
    ``[[Sigma, Sigma - S], [Sigma - S, Sigma]]``."""
    p = Sigma.shape[0]
    emp = np.cov(np.hstack([X, X_tilde]), rowvar=False)
    off = Sigma - np.diag(s)
    target = np.block([[Sigma, off], [off, Sigma]])
    return float(np.max(np.abs(emp - target))) if p else 0.0


def gaussian_knockoffs(X, seed: int, Sigma: np.ndarray | None = None) -> KnockoffDraw:
    """Sample ``X_tilde | X ~ N(X - X Sigma^-1 S, 2S - S Sigma^-1 S)``.

    ``X`` must be standardized (column means 0, unit variance); the
    equicorrelated rule ``s_j = min(2 lambda_min, 1)`` fixes ``S``.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    shrink = 0.0
    if Sigma is None:
        Sigma, shrink = estimate_covariance(X)
    s = equicorrelated_s(Sigma)
    Sinv_S = np.linalg.solve(Sigma, np.diag(s))
    mean = X - X @ Sinv_S
    V = 2.0 * np.diag(s) - np.diag(s) @ Sinv_S
    V = 0.5 * (V + V.T)
    w, U = np.linalg.eigh(V)
    root = U * np.sqrt(np.clip(w, 0.0, None))
    rng = np.random.default_rng(seed)
    Xt = mean + rng.standard_normal((n, p)) @ root.T
    dev = joint_cov_deviation(X, Xt, Sigma, s)
    return KnockoffDraw(Xt, s, Sigma, shrink, dev)


def make_knockoffs(X, seed: int) -> np.ndarray:
    return gaussian_knockoffs(X, seed).X_tilde


def feature_statistic(X, X_tilde, y, kind: str = "gbt-gain", seed: int = 0,
                      hp: Hyperparams | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Importance of each original column and of its knockoff.

    ``lasso``: absolute coefficients of a 5-fold CV lasso on ``[X, X_tilde]``.
    ``gbt-gain``: total split gain of a boosted model on ``[X, X_tilde]``.
    """
    if kind not in STATISTICS:
        raise ConfigError(f"unknown feature statistic {kind!r}; choose from {STATISTICS}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    p = X.shape[1]
    if np.all(y == y[0]):
        return np.zeros(p), np.zeros(p)
    XX = np.hstack([X, X_tilde])
    if kind == "lasso":
        cv = KFold(n_splits=5, shuffle=True, random_state=seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            model = LassoCV(cv=cv, alphas=50, max_iter=5000, tol=1e-6).fit(XX, y - y.mean())
        z = np.abs(model.coef_)
    else:
        z = fit_gbt(XX, y, hp or GAIN_HP, seed).feature_gain()
    return z[:p], z[p:]


def knockoff_threshold(W, q: float, plus: bool = True) -> float:
    """Smallest ``t`` among the nonzero ``|W_j|`` whose estimated FDP is at most
    ``q``; ``inf`` when none qualifies."""
    if not 0 < q < 1:
        raise ConfigError("q must lie in (0, 1)")
    W = np.asarray(W, dtype=float)
    offset = 1.0 if plus else 0.0
    for t in np.unique(np.abs(W[W != 0])):
        fdp = (offset + np.sum(W <= -t)) / max(1, np.sum(W >= t))
        if fdp <= q:
            return float(t)
    return math.inf


def knockoff_filter(W, q: float, plus: bool = True) -> tuple[float, list[int]]:
    T = knockoff_threshold(W, q, plus)
    W = np.asarray(W, dtype=float)
    selected = [] if math.isinf(T) else [int(j) for j in np.flatnonzero(W >= T)]
    return T, selected


@dataclass(frozen=True)
class KnockoffResult:
    W: np.ndarray
    Z: np.ndarray
    Z_tilde: np.ndarray
    threshold_T: float
    selected: tuple[int, ...]
    q: float
    s_vector: np.ndarray
    names: tuple[str, ...] = ()
    statistic: str = "gbt-gain"
    plus: bool = True
    shrinkage: float = 0.0
    max_cov_deviation: float = float("nan")
    q_scores: dict = field(default_factory=dict)

    @property
    def selected_names(self) -> list[str]:
        return [self.names[j] for j in self.selected]

    def to_report(self) -> dict:
        return {
            "features": list(self.names),
            "W": [float(w) for w in self.W],
            "Z": [float(z) for z in self.Z],
            "Z_tilde": [float(z) for z in self.Z_tilde],
            "threshold_T": None if math.isinf(self.threshold_T) else float(self.threshold_T),
            "q": float(self.q),
            "plus": self.plus,
            "statistic": self.statistic,
            "selected": self.selected_names,
            "s_value": float(self.s_vector[0]) if len(self.s_vector) else None,
            "shrinkage": float(self.shrinkage),
            "cov_deviation": float(self.max_cov_deviation),
            "q_scores": {str(k): v for k, v in self.q_scores.items()},
        }


def select_q(X, y, W, q_values, groups, seed: int, hp: Hyperparams | None = None) -> tuple[float, dict]:
    """Pick the q whose selected set gives the best district-stratified CV R2
    of a boosted model (ties go to the smaller q)."""
    folds = stratified_folds(groups, 5, seed)
    scores = {}
    for q in sorted(q_values):
        _, sel = knockoff_filter(W, q)
        scores[q] = -math.inf if not sel else cv_r2(X[:, sel], y, hp or Hyperparams(), folds, seed)
    best = max(sorted(scores), key=lambda q: (scores[q], -q))
    return best, scores


def run_knockoffs(X, y, names=(), q: float = 0.2, kind: str = "gbt-gain", seed: int = 0,
                  plus: bool = True, q_values=None, groups=None) -> KnockoffResult:
    """Knockoff construction, statistics and filtering in one call."""
    X = np.asarray(X, dtype=float)
    draw = gaussian_knockoffs(X, seed)
    Z, Zt = feature_statistic(X, draw.X_tilde, y, kind, seed)
    W = np.abs(Z) - np.abs(Zt)
    q_scores = {}
    if q_values:
        if groups is None:
            raise ConfigError("q selection by CV needs district groups")
        q, q_scores = select_q(X, np.asarray(y, float), W, q_values, groups, seed)
    T, sel = knockoff_filter(W, q, plus)
    logger.info("knockoffs: %d of %d selected at q=%.3g (T=%s)", len(sel), X.shape[1], q, T)
    return KnockoffResult(W, Z, Zt, T, tuple(sel), q, draw.s, tuple(names), kind, plus,
                          draw.shrinkage, draw.max_deviation, q_scores)
