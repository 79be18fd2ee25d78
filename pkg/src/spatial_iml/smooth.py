"""Penalized B-spline smooths: bases, difference penalties, tensor products,
weighted penalized least squares, GCV and pointwise confidence bands.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import qr
from scipy.stats import norm

from .errors import ConfigError, DataError, NumericalError

logger = logging.getLogger(__name__)

LAMBDA_GRID = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)
N_SPLINES_GRID = (5, 8, 12, 20)


class KnotDegeneracyError(DataError):
    pass


@dataclass(frozen=True)
class SmoothSpec:
    kind: str = "univariate"
    n_splines: int | tuple[int, int] = 8
    degree: int = 3
    penalty_order: int = 2
    lam: float | tuple[float, float] = 1.0

    def __post_init__(self):
        if self.kind not in ("univariate", "tensor2d"):
            raise ConfigError(f"unknown smooth kind {self.kind!r}")
        for ns in self.margins:
            if ns < self.degree + 1:
                raise ConfigError(f"n_splines={ns} < degree+1={self.degree + 1}")
        for lam in np.atleast_1d(self.lam):
            if not (math.isfinite(lam) and lam >= 0):
                raise ConfigError(f"lambda must be finite and >= 0, got {lam}")

    @property
    def margins(self) -> tuple[int, ...]:
        ns = self.n_splines
        if self.kind == "tensor2d":
            return tuple(ns) if isinstance(ns, (tuple, list)) else (ns, ns)
        return (int(ns),)

    @property
    def lambdas(self) -> tuple[float, ...]:
        lam = self.lam
        if self.kind == "tensor2d":
            return tuple(lam) if isinstance(lam, (tuple, list)) else (lam, lam)
        return (float(lam),)


# ---------------------------------------------------------------------------
# bases and penalties

def quantile_knots(x, n_splines: int, degree: int = 3, weights=None) -> np.ndarray:
    """Clamped knot vector with interior knots at quantiles of ``x``.

    Only rows with positive weight (all rows if ``weights`` is None) place
    knots.
    """
    x = np.asarray(x, dtype=float)
    if weights is not None:
        x = x[np.asarray(weights) > 0]
    xs = np.unique(x)
    if len(xs) < n_splines or len(xs) < 2:
        raise KnotDegeneracyError(
            f"{len(xs)} distinct values cannot support {n_splines} splines; use a smaller basis")
    lo, hi = float(xs[0]), float(xs[-1])
    n_int = n_splines - degree - 1
    interior = np.quantile(x, np.linspace(0, 1, n_int + 2)[1:-1]) if n_int > 0 else np.empty(0)
    full = np.r_[lo, interior, hi]
    if np.any(np.diff(full) <= 0):
        raise KnotDegeneracyError(
            f"quantile knots collapse for n_splines={n_splines} (tied values); use a smaller basis")
    return np.r_[[lo] * degree, full, [hi] * degree]


def greville(knots: np.ndarray, degree: int) -> np.ndarray:
    nb = len(knots) - degree - 1
    if degree == 0:
        return 0.5 * (knots[:-1] + knots[1:])
    return np.array([knots[j + 1:j + degree + 1].mean() for j in range(nb)])


def difference_matrix(knots: np.ndarray, degree: int, order: int) -> np.ndarray:
    """Order-``order`` divided differences of the coefficients at the Greville
    abscissae, scaled by ``order! * h**order`` (``h`` = mean abscissa spacing).

    On equally spaced knots this is the ordinary P-spline difference matrix;
    on quantile knots its null space is still the polynomials of degree
    below ``order`` in x.
    """
    nb = len(knots) - degree - 1
    if order == 0:
        return np.eye(nb)
    if nb <= order:
        return np.zeros((0, nb))
    g = greville(knots, degree)
    D = np.eye(nb)
    for r in range(1, order + 1):
        D = (D[1:] - D[:-1]) / (g[r:] - g[:-r])[:, None]
    h = (g[-1] - g[0]) / (nb - 1)
    return D * math.factorial(order) * h ** order


def bspline_design(x, knots: np.ndarray, degree: int, deriv: int = 0) -> np.ndarray:
    """B-spline basis (or its derivative) at ``x``, clamped to the knot span."""
    x = np.clip(np.asarray(x, dtype=float), knots[0], knots[-1])
    nb = len(knots) - degree - 1
    spl = BSpline(knots, np.eye(nb), degree, extrapolate=True)
    if deriv:
        spl = spl.derivative(deriv) if degree >= deriv else None
        if spl is None:
            return np.zeros((len(x), nb))
    return np.asarray(spl(x)).reshape(len(x), nb)


def row_kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return (A[:, :, None] * B[:, None, :]).reshape(A.shape[0], A.shape[1] * B.shape[1])


@dataclass(frozen=True)
class Basis:
    """Knots and degree of one smooth term; evaluates designs and penalties."""

    kind: str
    knots: tuple[np.ndarray, ...]
    degree: int = 3
    penalty_order: int = 2

    @classmethod
    def build(cls, spec: SmoothSpec, *cols, weights=None) -> "Basis":
        if len(cols) != len(spec.margins):
            raise ConfigError(f"{spec.kind} smooth needs {len(spec.margins)} input columns")
        knots = tuple(quantile_knots(c, ns, spec.degree, weights)
                      for c, ns in zip(cols, spec.margins))
        return cls(spec.kind, knots, spec.degree, spec.penalty_order)

    @property
    def margins(self) -> tuple[int, ...]:
        return tuple(len(t) - self.degree - 1 for t in self.knots)

    @property
    def dim(self) -> int:
        return int(np.prod(self.margins))

    @property
    def null_dim(self) -> int:
        return min(self.penalty_order, self.margins[0]) ** len(self.knots)

    def range(self) -> list[tuple[float, float]]:
        return [(float(t[0]), float(t[-1])) for t in self.knots]

    def design(self, *cols, deriv: int = 0) -> np.ndarray:
        mats = [bspline_design(c, t, self.degree, deriv) for c, t in zip(cols, self.knots)]
        if len(mats) == 1:
            return mats[0]
        return row_kron(*mats)

    def penalties(self) -> list[np.ndarray]:
        Ps = []
        for t in self.knots:
            D = difference_matrix(t, self.degree, self.penalty_order)
            Ps.append(D.T @ D)
        if len(Ps) == 1:
            return Ps
        nu, nv = self.margins
        return [np.kron(Ps[0], np.eye(nv)), np.kron(np.eye(nu), Ps[1])]


def bspline_basis(x, spec: SmoothSpec) -> np.ndarray:
    return Basis.build(spec, x).design(x)


def tensor_basis(u, v, spec: SmoothSpec) -> tuple[np.ndarray, list[np.ndarray]]:
    """Row-wise Kronecker design and the summed penalty
    ``lam_u (P_u kron I) + lam_v (I kron P_v)``."""
    if spec.kind != "tensor2d":
        raise ConfigError("tensor_basis needs a tensor2d spec")
    b = Basis.build(spec, u, v)
    P = sum(lam * Pk for lam, Pk in zip(spec.lambdas, b.penalties()))
    return b.design(u, v), P


# ---------------------------------------------------------------------------
# fitting

@dataclass(frozen=True)
class FittedSmooth:
    """One centred smooth term; coefficients live in the B-spline basis."""

    basis: Basis | None
    coefficients: np.ndarray
    posterior_cov: np.ndarray
    edf: float
    lambdas: tuple[float, ...]
    penalty: np.ndarray

    def evaluate(self, *cols) -> np.ndarray:
        return self.basis.design(*cols) @ self.coefficients

    def derivative(self, x) -> np.ndarray:
        return self.basis.design(x, deriv=1) @ self.coefficients


@dataclass(frozen=True)
class PlsFit:
    intercept: float
    smooths: tuple[FittedSmooth, ...]
    fitted: np.ndarray
    weights: np.ndarray
    rss: float
    edf: float
    n_eff: int
    sigma2: float
    gcv: float
    ridge: float
    intercept_var: float = float("nan")

    def predict(self, blocks: Sequence[np.ndarray]) -> np.ndarray:
        out = np.full(blocks[0].shape[0] if blocks else 0, self.intercept)
        for B, s in zip(blocks, self.smooths):
            out = out + B @ s.coefficients
        return out


def _centering_basis(c: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the complement of ``c`` (so ``c @ Z = 0``)."""
    Q, _ = qr(c.reshape(-1, 1), mode="full")
    return Q[:, 1:]


def fit_pls(blocks: Sequence[np.ndarray], penalties: Sequence, y, obs_weights=None,
            lambdas: Sequence | None = None, bases: Sequence[Basis] | None = None) -> PlsFit:
    """Minimize ``sum_i w_i (y_i - eta_i)^2 + sum_b lam_b beta_b' P_b beta_b``.

    ``eta = beta_0 + sum_b X_b beta_b``. Each block is centred so that its
    (weighted) fitted values sum to zero over the training rows. ``penalties``
    and ``lambdas`` hold one entry per block; an entry may itself be a list
    (tensor blocks carry one penalty per margin). Weights are rescaled to a
    maximum of 1, so multiplying every weight by a constant changes nothing.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    w = np.ones(n) if obs_weights is None else np.asarray(obs_weights, dtype=float)
    if np.any(w < 0) or not np.any(w > 0):
        raise ConfigError("observation weights must be >= 0 and not all zero")
    w = w / w.max()
    if lambdas is None:
        lambdas = [1.0] * len(blocks)

    cols = [np.ones((n, 1))]
    S_blocks = [np.zeros((1, 1))]
    Zs, raw_P = [], []
    for B, P, lam in zip(blocks, penalties, lambdas):
        Plist = P if isinstance(P, (list, tuple)) else [P]
        lams = lam if isinstance(lam, (list, tuple)) else [lam] * len(Plist)
        Psum = sum(l * Pk for l, Pk in zip(lams, Plist))
        Z = _centering_basis(w @ B)
        Zs.append(Z)
        raw_P.append((tuple(float(l) for l in lams), Psum))
        cols.append(B @ Z)
        S_blocks.append(Z.T @ Psum @ Z)
    X = np.hstack(cols)
    sizes = [c.shape[1] for c in cols]
    k = X.shape[1]
    S = np.zeros((k, k))
    pos = 0
    for sz, Sb in zip(sizes, S_blocks):
        S[pos:pos + sz, pos:pos + sz] = Sb
        pos += sz

    XtW = X.T * w
    XtWX = XtW @ X
    A = XtWX + S
    A = 0.5 * (A + A.T)
    evals, evecs = np.linalg.eigh(A)
    ridge = 0.0
    if evals[0] <= 1e-13 * max(evals[-1], 1e-300):
        ridge = 1e-8 * max(float(np.mean(np.diag(XtWX))), 1e-300)
        evals = evals + ridge
        logger.debug("penalized system rank deficient; ridge %.3g added", ridge)
    A_inv = (evecs / evals) @ evecs.T
    coef = A_inv @ (XtW @ y)
    fitted = X @ coef
    r = y - fitted
    rss = float(w @ (r * r))
    F = A_inv @ XtWX
    diagF = np.diag(F)
    edf = float(diagF.sum())
    n_eff = int(np.sum(w > 0))
    dof = n_eff - edf
    sigma2 = rss / dof if dof > 1e-8 else float("nan")
    gcv = n_eff * rss / dof ** 2 if dof > 1e-8 else float("inf")
    cov = A_inv * sigma2

    smooths = []
    pos = 1
    for i, (Z, (lams, Psum)) in enumerate(zip(Zs, raw_P)):
        sz = Z.shape[1]
        sl = slice(pos, pos + sz)
        beta = Z @ coef[sl]
        C = Z @ cov[sl, sl] @ Z.T
        smooths.append(FittedSmooth(
            basis=bases[i] if bases is not None else None,
            coefficients=beta,
            posterior_cov=0.5 * (C + C.T),
            edf=float(diagF[sl].sum()),
            lambdas=lams,
            penalty=Psum,
        ))
        pos += sz
    return PlsFit(float(coef[0]), tuple(smooths), fitted, w, rss, edf, n_eff, sigma2, gcv, ridge,
                  float(cov[0, 0]))


def gcv_score(fit: PlsFit, y=None, w=None) -> float:
    """``n * RSS_w / (n - tr(H))**2`` (lower is better)."""
    if y is None:
        rss, n = fit.rss, fit.n_eff
    else:
        w = fit.weights if w is None else np.asarray(w, float) / np.max(w)
        r = np.asarray(y, float) - fit.fitted
        rss, n = float(w @ (r * r)), int(np.sum(w > 0))
    if fit.edf >= n - 1e-8:
        raise NumericalError(f"degenerate fit: tr(H)={fit.edf:.3f} >= n={n}")
    return n * rss / (n - fit.edf) ** 2


def grid_search(fit_cell: Callable[[tuple], PlsFit], cells: Iterable[tuple]):
    """Evaluate ``fit_cell`` over ``cells`` (already in tie-break order) and
    return ``(best_cell, best_fit, scores)``; the first strict minimum of GCV
    wins. Cells that fail or are degenerate are skipped."""
    best, best_fit, best_score = None, None, math.inf
    scores = {}
    for cell in cells:
        try:
            fit = fit_cell(cell)
            score = gcv_score(fit)
        except (KnotDegeneracyError, NumericalError) as exc:
            logger.debug("grid cell %s skipped: %s", cell, exc)
            scores[cell] = math.inf
            continue
        scores[cell] = score
        if score < best_score:
            best, best_fit, best_score = cell, fit, score
    if best_fit is None:
        raise NumericalError("no grid cell produced a usable fit")
    return best, best_fit, scores


def fit_univariate(x, y, w=None, lam: float = 1.0, n_splines: int = 8, degree: int = 3,
                   penalty_order: int = 2) -> PlsFit:
    spec = SmoothSpec("univariate", n_splines, degree, penalty_order, lam)
    b = Basis.build(spec, x, weights=w)
    return fit_pls([b.design(x)], [b.penalties()], y, w, [lam], bases=[b])


def select_univariate(x, y, w=None, lambdas=LAMBDA_GRID, n_splines=N_SPLINES_GRID, **kw):
    """GCV grid search over (lambda, n_splines); ties prefer smaller lambda,
    then fewer splines."""
    cells = [(lam, ns) for lam in sorted(lambdas) for ns in sorted(n_splines)]
    return grid_search(lambda c: fit_univariate(x, y, w, c[0], c[1], **kw), cells)


def ci_band(fit: FittedSmooth, grid, level: float = 0.95, deriv: int = 0):
    """Pointwise band ``estimate +/- z * sqrt(diag(B C B'))``.

    Returns ``(estimate, lower, upper, clamped)``; ``clamped`` flags grid
    points outside the training range (they are evaluated at the boundary).
    """
    if not 0 < level < 1:
        raise ConfigError("level must lie in (0, 1)")
    grid = np.asarray(grid, dtype=float)
    lo, hi = fit.basis.range()[0]
    clamped = (grid < lo) | (grid > hi)
    B = fit.basis.design(grid, deriv=deriv)
    est = B @ fit.coefficients
    se = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", B, fit.posterior_cov, B), 0.0, None))
    z = norm.ppf(0.5 + level / 2)
    return est, est - z * se, est + z * se, clamped
