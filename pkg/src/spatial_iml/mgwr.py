"""Multiscale geographically weighted regression over district centroids.

Each term k (the intercept is term 0) has its own adaptive bandwidth ``b_k``,
a neighbour count. Coefficients are fitted by backfitting: terms are updated
one at a time, each from its partial residual, until the residual sum of
squares stops changing.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError, NumericalError

logger = logging.getLogger(__name__)

KERNELS = ("bisquare", "gaussian-adaptive", "uniform")
CRITERIA = ("AICc", "LOO-CV")
GOLDEN = (math.sqrt(5) - 1) / 2


# ---------------------------------------------------------------------------
# kernels and local regression

@dataclass(frozen=True)
class KernelWeights:
    weights: np.ndarray
    bandwidth: int
    kernel: str
    support: float


def _kernel(d: np.ndarray, D: np.ndarray, kernel: str) -> np.ndarray:
    r = d / D
    if kernel == "bisquare":
        return np.where(r < 1, (1 - r * r) ** 2, 0.0)
    if kernel == "gaussian-adaptive":
        return np.exp(-0.5 * r * r)
    if kernel == "uniform":
        return np.where(r <= 1, 1.0, 0.0)
    raise ConfigError(f"unknown kernel {kernel!r}; choose from {KERNELS}")


def _distances(coords) -> tuple[np.ndarray, np.ndarray]:
    c = np.asarray(coords, dtype=float)
    diff = c[:, None, :] - c[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    return dist, np.sort(dist, axis=1)


def _support(sorted_dist: np.ndarray, b: int) -> np.ndarray:
    D = sorted_dist[:, b - 1]
    if np.any(D <= 0):
        i = int(np.flatnonzero(D <= 0)[0])
        raise DataError(f"location {i} has {b} or more coincident centroids; "
                        "jitter duplicate coordinates or raise the bandwidth")
    return D


def kernel_weights(centroids, i: int, b: int, kernel: str = "bisquare") -> KernelWeights:
    """Weights of every location around target ``i``; the support is the
    distance to the ``b``-th nearest neighbour, counting ``i`` itself."""
    c = np.asarray(centroids, dtype=float)
    L = len(c)
    if not 1 <= b <= L:
        raise ConfigError(f"bandwidth must lie in [1, {L}], got {b}")
    d = np.sqrt(np.sum((c - c[i]) ** 2, axis=1))
    D = float(np.sort(d)[b - 1])
    if D <= 0:
        raise DataError(f"location {i} has {b} or more coincident centroids; "
                        "jitter duplicate coordinates or raise the bandwidth")
    return KernelWeights(_kernel(d, np.float64(D), kernel), int(b), kernel, D)


def weight_matrix(sorted_dist: np.ndarray, dist: np.ndarray, b: int, kernel: str) -> np.ndarray:
    """Row i holds the kernel weights around target i."""
    D = _support(sorted_dist, b)
    return _kernel(dist, D[:, None], kernel)


def local_wls(X, y, w) -> tuple[np.ndarray, float]:
    """Weighted least squares ``(X' W X)^-1 X' W y`` via a least-squares solve
    of the row-scaled system. A ridge of ``1e-8 * mean(diag(X'WX))`` is added
    when the weighted design is rank deficient; returns ``(beta, ridge)``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    sw = np.sqrt(w)
    A = X * sw[:, None]
    beta, _, rank, _ = np.linalg.lstsq(A, y * sw, rcond=None)
    if rank >= X.shape[1]:
        return beta, 0.0
    G = A.T @ A
    ridge = 1e-8 * max(float(np.mean(np.diag(G))), 1e-300)
    logger.warning("weighted design rank %d < %d; ridge %.3g added", rank, X.shape[1], ridge)
    return np.linalg.solve(G + ridge * np.eye(len(G)), A.T @ (y * sw)), ridge


def _solve_batched(G: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Solve ``G[i] beta[i] = c[i]`` for every location, ridge-bumping
    singular systems."""
    scale = np.einsum("ijj->i", G) / G.shape[1]
    cond_ok = np.linalg.cond(G) < 1e12
    if not np.all(cond_ok):
        bad = ~cond_ok
        G = G.copy()
        G[bad] += (1e-8 * np.maximum(scale[bad], 1e-300))[:, None, None] * np.eye(G.shape[1])
        logger.warning("%d local systems ridge-stabilized", int(bad.sum()))
    return np.linalg.solve(G, c[..., None])[..., 0]


def gwr(coords, X, y, b: int, kernel: str = "bisquare", dist=None):
    """Single-bandwidth GWR; ``X`` includes any intercept column.

    Returns ``(beta L x p, hat_diag, rss)``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    dist, sd = _distances(coords) if dist is None else dist
    W = weight_matrix(sd, dist, b, kernel)
    G = np.einsum("il,lj,lk->ijk", W, X, X)
    c = W @ (X * y[:, None])
    beta = _solve_batched(G, c)
    Ginv_x = np.linalg.solve(G, X[..., None])[..., 0]
    hat = np.diag(W) * np.einsum("ij,ij->i", X, Ginv_x)
    r = y - np.einsum("ij,ij->i", X, beta)
    return beta, hat, float(r @ r)


def _criterion(rss: float, hat: np.ndarray, resid: np.ndarray, criterion: str) -> float:
    n = len(hat)
    if criterion == "AICc":
        tr = float(hat.sum())
        if tr >= n - 2:
            return math.inf
        sigma = math.sqrt(max(rss, 1e-300) / n)
        return 2 * n * math.log(sigma) + n * math.log(2 * math.pi) + n * (n + tr) / (n - 2 - tr)
    if criterion == "LOO-CV":
        denom = 1.0 - hat
        if np.any(denom <= 1e-12):
            return math.inf
        return float(np.sum((resid / denom) ** 2))
    raise ConfigError(f"unknown criterion {criterion!r}; choose from {CRITERIA}")


def single_term_fit(x, e, W) -> tuple[np.ndarray, np.ndarray]:
    """GWR of ``e`` on the single column ``x`` (no intercept) for every target
    row of ``W``: returns ``(beta, hat_diag)``."""
    den = W @ (x * x)
    den = np.where(den > 0, den, 1e-300)
    beta = (W @ (x * e)) / den
    hat = np.diag(W) * x * x / den
    return beta, hat


def single_term_score(x, e, W, criterion: str) -> float:
    beta, hat = single_term_fit(x, e, W)
    r = e - x * beta
    return _criterion(float(r @ r), hat, r, criterion)


def golden_section_int(score, lo: int, hi: int, n_scan: int = 8) -> int:
    """Minimize ``score`` over integers in ``[lo, hi]``: a coarse scan at
    ``n_scan`` points, then golden section inside the best bracket. Returns
    the best value evaluated (ties go to the larger bandwidth)."""
    if lo >= hi:
        return int(hi)
    cache: dict[int, float] = {}

    def f(b: int) -> float:
        b = int(b)
        if b not in cache:
            cache[b] = score(b)
        return cache[b]

    scan = sorted({int(round(v)) for v in np.linspace(lo, hi, n_scan)})
    vals = [f(b) for b in scan]
    j = int(np.argmin(vals))
    a = scan[max(j - 1, 0)]
    c = scan[min(j + 1, len(scan) - 1)]
    while c - a > 2:
        x1 = int(round(c - GOLDEN * (c - a)))
        x2 = int(round(a + GOLDEN * (c - a)))
        if x1 >= x2:
            x1, x2 = (a + c) // 2, (a + c) // 2 + 1
        if f(x1) <= f(x2):
            c = x2
        else:
            a = x1
    for b in range(a, c + 1):
        f(b)
    return min(cache, key=lambda b: (cache[b], -b))


def select_bandwidth(x_term, partial_residual, centroids, criterion: str = "AICc",
                     kernel: str = "bisquare", b_min: int | None = None, b_max: int | None = None,
                     dist=None) -> int:
    """Bandwidth of a single-term GWR of the partial residual on ``x_term``."""
    x = np.asarray(x_term, dtype=float)
    e = np.asarray(partial_residual, dtype=float)
    dist, sd = _distances(centroids) if dist is None else dist
    L = len(x)
    lo = min(b_min if b_min is not None else 2, L)
    hi = min(b_max if b_max is not None else L, L)
    if criterion not in CRITERIA:
        raise ConfigError(f"unknown criterion {criterion!r}; choose from {CRITERIA}")
    return golden_section_int(
        lambda b: single_term_score(x, e, weight_matrix(sd, dist, b, kernel), criterion), lo, hi)


def select_gwr_bandwidth(coords, X, y, criterion: str = "AICc", kernel: str = "bisquare",
                         b_min: int | None = None, dist=None) -> int:
    dist = _distances(coords) if dist is None else dist
    L = len(y)
    lo = min(b_min if b_min is not None else 2 * (X.shape[1] + 1), L)

    def score(b):
        beta, hat, rss = gwr(coords, X, y, b, kernel, dist)
        return _criterion(rss, hat, y - np.einsum("ij,ij->i", X, beta), criterion)

    return golden_section_int(score, lo, L)


# ---------------------------------------------------------------------------
# backfitting

@dataclass
class MgwrModel:
    coefficients: np.ndarray          # L x (p + 1), column 0 is the intercept
    bandwidths: np.ndarray            # p + 1 neighbour counts
    kernel: str
    criterion: str
    terms: tuple[str, ...]            # "intercept" followed by predictor names
    fitted: np.ndarray
    residuals: np.ndarray
    y: np.ndarray
    X: np.ndarray                     # design incl. the intercept column
    coords: np.ndarray
    trace: list[dict] = field(default_factory=list)
    converged: bool = False
    monotonicity_violations: int = 0
    bandwidth_cycle: bool = False
    district_ids: tuple[str, ...] = ()
    scaling: dict = field(default_factory=dict)

    @property
    def n_iter(self) -> int:
        return len(self.trace)

    def coefficient(self, name: str) -> np.ndarray:
        if name not in self.terms:
            raise ConfigError(f"{name!r} is not a term of this model")
        return self.coefficients[:, self.terms.index(name)]

    def trace_frame(self) -> pd.DataFrame:
        rows = []
        for t in self.trace:
            row = {"iteration": t["iteration"], "rss": t["rss"],
                   "weighted_rss": t["weighted_rss"], "soc": t["soc"],
                   "max_step": t["max_step"]}
            row.update({f"bw_{n}": b for n, b in zip(self.terms, t["bandwidths"])})
            rows.append(row)
        cols = ["iteration", "rss", "weighted_rss", "soc", "max_step"] + [f"bw_{n}" for n in self.terms]
        return pd.DataFrame(rows, columns=cols)

    def to_geojson(self, boundaries: dict | None = None, regions=None) -> dict:
        """Centroid points (or the supplied boundary polygons) with one
        coefficient per term as properties."""
        ids = self.district_ids or tuple(str(i) for i in range(len(self.y)))
        shapes = {}
        if boundaries is not None:
            for feat in boundaries.get("features", []):
                shapes[str(feat.get("properties", {}).get("district_id"))] = feat.get("geometry")
        feats = []
        for i, dist in enumerate(ids):
            props = {"district_id": dist}
            for j, name in enumerate(self.terms):
                props[f"beta_{name}"] = float(self.coefficients[i, j])
            props["residual"] = float(self.residuals[i])
            if regions is not None:
                props["region"] = int(regions[i])
            geom = shapes.get(dist) or {"type": "Point",
                                        "coordinates": [float(v) for v in self.coords[i]]}
            feats.append({"type": "Feature", "geometry": geom, "properties": props})
        return {
            "type": "FeatureCollection",
            "metadata": {
                "kernel": self.kernel,
                "criterion": self.criterion,
                "bandwidths": {n: int(b) for n, b in zip(self.terms, self.bandwidths)},
                "converged": bool(self.converged),
                "iterations": self.n_iter,
                "monotonicity_violations": int(self.monotonicity_violations),
                "bandwidth_cycle": bool(self.bandwidth_cycle),
            },
            "features": feats,
        }


def mgwr(coords, X, y, terms: Sequence[str] | None = None, kernel: str = "bisquare",
         criterion: str = "AICc", tol: float = 1e-5, max_iter: int = 200, bandwidths=None,
         b_min: int | None = None, district_ids: Sequence[str] = (),
         init: str = "gwr", beta_tol: float = 1e-6) -> MgwrModel:
    """Backfit an MGWR of ``y`` on ``X`` (an intercept column is prepended).

    Initialization is a GWR with one shared bandwidth. Each sweep visits the
    terms in order: the bandwidth of term k is reselected from the partial
    residual ``y - sum_{m != k} x_m beta_m``, then every location's
    coefficient ``beta_ik`` is refit by weighted least squares of that
    location's partial residual ``y - sum_{m != k} x_m beta_im`` on ``x_k``
    (other coefficients held at their value at location i). With all
    bandwidths equal the fixed point is exactly the GWR solution.
    Iteration stops when ``|RSS_t - RSS_{t-1}| / RSS_t < tol`` and no
    coefficient moved by more than ``beta_tol`` in the last sweep (RSS
    changes are second order in the coefficient error, so the first test
    alone stops early).

    ``bandwidths`` (an int or one int per term) freezes the bandwidths.
    ``init="ols"`` starts from the global least-squares fit instead of GWR.
    """
    if kernel not in KERNELS:
        raise ConfigError(f"unknown kernel {kernel!r}; choose from {KERNELS}")
    if criterion not in CRITERIA:
        raise ConfigError(f"unknown criterion {criterion!r}; choose from {CRITERIA}")
    coords = np.asarray(coords, dtype=float)
    y = np.asarray(y, dtype=float)
    L = len(y)
    Xd = np.column_stack([np.ones(L), np.asarray(X, dtype=float).reshape(L, -1)])
    K = Xd.shape[1]
    terms = ("intercept",) + tuple(terms if terms is not None else
                                   (f"x{j}" for j in range(1, K)))
    if len(terms) != K:
        raise ConfigError("terms must name every column of X")
    if b_min is None:
        b_min = min(2 * (K - 1 + 2), L)
    dist = _distances(coords)
    dmat, sd = dist

    frozen = bandwidths is not None
    if frozen:
        bw = np.broadcast_to(np.asarray(bandwidths, dtype=int), (K,)).copy()
        if np.any(bw < 1) or np.any(bw > L):
            raise ConfigError(f"bandwidths must lie in [1, {L}]")
        b0 = int(bw[0])
    else:
        b0 = select_gwr_bandwidth(coords, Xd, y, criterion, kernel, b_min, dist)
        bw = np.full(K, b0)
    if init == "gwr":
        beta, _, _ = gwr(coords, Xd, y, b0, kernel, dist)
    elif init == "ols":
        beta = np.tile(np.linalg.lstsq(Xd, y, rcond=None)[0], (L, 1))
    else:
        raise ConfigError(f"unknown init {init!r}; choose 'gwr' or 'ols'")
    rss = float(np.sum((y - np.sum(Xd * beta, axis=1)) ** 2))

    W_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def local_system(k: int, b: int):
        # G[i, m] = sum_l w_il x_lk x_lm ; c[i] = sum_l w_il x_lk y_l
        key = (k, b)
        if key not in W_cache:
            if len(W_cache) > 4 * K:
                W_cache.clear()
            W = weight_matrix(sd, dmat, b, kernel)
            G = W @ (Xd[:, k:k + 1] * Xd)
            c = W @ (Xd[:, k] * y)
            W_cache[key] = (W, G, c)
        return W_cache[key]

    def weighted_rss() -> float:
        # mean over terms of sum_i sum_l w^k_il (y_l - x_l' beta_i)^2, the
        # quantity each coordinate update lowers
        R = (y[None, :] - beta @ Xd.T) ** 2
        return float(np.mean([np.sum(local_system(k, int(bw[k]))[0] * R) for k in range(K)]))

    trace = []
    converged = False
    violations = 0
    cycle_frozen = False
    seen_bw: list[tuple[int, ...]] = [tuple(int(b) for b in bw)]
    wrss = weighted_rss()
    for it in range(1, max_iter + 1):
        prev_bw = bw.copy()
        prev_beta = beta.copy()
        for k in range(K):
            if not (frozen or cycle_frozen):
                others = np.sum(np.delete(Xd * beta, k, axis=1), axis=1)
                bw[k] = select_bandwidth(Xd[:, k], y - others, coords, criterion, kernel,
                                         b_min, L, dist)
            _, G, c = local_system(k, int(bw[k]))
            diag = G[:, k]
            if np.any(diag <= 0):
                raise NumericalError(f"term {terms[k]!r} has no weighted support at some location")
            off = np.sum(G * beta, axis=1) - diag * beta[:, k]
            beta[:, k] = (c - off) / diag
        new_rss = float(np.sum((y - np.sum(Xd * beta, axis=1)) ** 2))
        soc = abs(new_rss - rss) / max(new_rss, 1e-300)
        new_wrss = weighted_rss()
        # a bandwidth change moves the objective, so only steady sweeps count
        if new_wrss > wrss * (1 + 1e-9) + 1e-300 and np.array_equal(prev_bw, bw):
            violations += 1
            logger.info("sweep %d: weighted RSS rose from %.6g to %.6g", it, wrss, new_wrss)
        wrss = new_wrss
        step = float(np.max(np.abs(beta - prev_beta)))
        trace.append({"iteration": it, "rss": new_rss, "weighted_rss": new_wrss, "soc": soc,
                      "max_step": step,
                      "bandwidths": [int(b) for b in bw]})
        rss = new_rss
        if soc < tol and step < beta_tol:
            converged = True
            break
        key = tuple(int(b) for b in bw)
        if not (frozen or cycle_frozen) and key != seen_bw[-1] and key in seen_bw:
            # bandwidth selection oscillates between configurations: keep the
            # widest bandwidth each term took inside the cycle and let the
            # coefficients settle
            cycle = np.array(seen_bw[seen_bw.index(key):])
            bw = cycle.max(axis=0)
            cycle_frozen = True
            logger.info("sweep %d: bandwidth cycle detected, frozen at %s", it, bw.tolist())
        seen_bw.append(key)
    if not converged:
        logger.warning("MGWR did not converge in %d sweeps", max_iter)

    fitted = np.sum(Xd * beta, axis=1)
    return MgwrModel(beta, bw.astype(int), kernel, criterion, terms, fitted, y - fitted, y, Xd,
                     coords, trace, converged, violations, cycle_frozen, tuple(district_ids))


def fit_mgwr(aggregates, predictors: Sequence[str], outcome: str, kernel: str = "bisquare",
             criterion: str = "AICc", tol: float = 1e-5, max_iter: int = 200,
             standardize: bool = True, bandwidths=None) -> MgwrModel:
    """MGWR on district aggregates; x and y are z-scored across districts by
    default so coefficient surfaces share one scale."""
    aggs = sorted(aggregates, key=lambda a: a.district_id)
    L = len(aggs)
    if L < 40:
        logger.warning("MGWR on %d districts; at least 40 are recommended", L)
    X = np.array([[a.feature(p) for p in predictors] for a in aggs], dtype=float).reshape(L, -1)
    y = np.array([a.outcome(outcome) for a in aggs], dtype=float)
    coords = np.array([a.centroid for a in aggs], dtype=float)
    scaling = {}
    if standardize:
        mx, sx = X.mean(axis=0), X.std(axis=0, ddof=1)
        my, sy = y.mean(), y.std(ddof=1)
        sx = np.where(sx > 0, sx, 1.0)
        sy = sy if sy > 0 else 1.0
        X = (X - mx) / sx
        y = (y - my) / sy
        scaling = {"x_mean": mx.tolist(), "x_sd": sx.tolist(), "y_mean": float(my), "y_sd": float(sy)}
    m = mgwr(coords, X, y, predictors, kernel, criterion, tol, max_iter, bandwidths,
             district_ids=[a.district_id for a in aggs])
    m.scaling = scaling
    return m


# ---------------------------------------------------------------------------
# regions

def _knn_graph(coords, k: int) -> list[set[int]]:
    c = np.asarray(coords, dtype=float)
    L = len(c)
    kk = min(k + 1, L)
    _, idx = cKDTree(c).query(c, k=kk)
    idx = np.asarray(idx).reshape(L, kk)
    nbrs = [set() for _ in range(L)]
    for i in range(L):
        for j in idx[i, 1:]:
            if j != i:
                nbrs[i].add(int(j))
                nbrs[int(j)].add(i)
    return nbrs


def region_candidates(m: MgwrModel, predictor: str, k_regions: int, knn: int = 6,
                      outlier_mad: float = 5.0) -> np.ndarray:
    """Contiguity-constrained agglomeration of locations by coefficient value.

    Locations with ``|beta - median| > outlier_mad * MAD`` forming
    neighbourhood clusters of fewer than 3 are kept as their own regions; the
    rest are merged greedily (Ward criterion, neighbouring regions only)
    until ``k_regions`` labels remain. Labels are numbered by first member.
    """
    beta = m.coefficient(predictor)
    return cluster_surface(m.coords, beta, k_regions, knn, outlier_mad)


def cluster_surface(coords, beta, k_regions: int, knn: int = 6, outlier_mad: float = 5.0) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    L = len(beta)
    if not 1 <= k_regions <= L:
        raise ConfigError(f"k_regions must lie in [1, {L}], got {k_regions}")
    nbrs = _knn_graph(coords, knn)

    med = np.median(beta)
    mad = np.median(np.abs(beta - med))
    is_out = np.abs(beta - med) > outlier_mad * mad if mad > 0 else np.zeros(L, bool)
    fixed: list[list[int]] = []
    if is_out.any() and k_regions >= 2:
        out_idx = np.flatnonzero(is_out)
        pos = {int(i): j for j, i in enumerate(out_idx)}
        rows, cols = [], []
        for i in out_idx:
            for j in nbrs[int(i)]:
                if j in pos:
                    rows.append(pos[int(i)])
                    cols.append(pos[j])
        n_out = len(out_idx)
        g = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_out, n_out))
        _, comp = connected_components(g, directed=False)
        for cid in range(comp.max() + 1):
            members = sorted(int(out_idx[j]) for j in np.flatnonzero(comp == cid))
            if len(members) < 3:
                fixed.append(members)
        fixed.sort()
        fixed = fixed[:k_regions - 1]
    fixed_set = {i for g in fixed for i in g}

    # Ward agglomeration of the remaining locations
    label = {i: i for i in range(L) if i not in fixed_set}
    members = {i: [i] for i in label}
    mean = {i: beta[i] for i in label}
    target = max(k_regions - len(fixed), 1)
    adj = {i: {j for j in nbrs[i] if j in label} for i in label}

    def ward(a, b):
        na, nb = len(members[a]), len(members[b])
        return na * nb / (na + nb) * (mean[a] - mean[b]) ** 2

    cents = np.asarray(coords, dtype=float)
    while len(members) > target:
        best = None
        for a in members:
            for b in adj[a]:
                if a < b:
                    cand = (ward(a, b), a, b)
                    if best is None or cand < best:
                        best = cand
        if best is None:
            # disconnected pieces: join the two regions with the closest centroids
            keys = sorted(members)
            cm = {r: cents[members[r]].mean(axis=0) for r in keys}
            best = min(((float(np.sum((cm[a] - cm[b]) ** 2)), a, b)
                        for i, a in enumerate(keys) for b in keys[i + 1:]))
        _, a, b = best
        na, nb = len(members[a]), len(members[b])
        mean[a] = (na * mean[a] + nb * mean[b]) / (na + nb)
        members[a].extend(members.pop(b))
        del mean[b]
        adj[a] = (adj[a] | adj.pop(b)) - {a, b}
        for r in adj:
            if b in adj[r]:
                adj[r].discard(b)
                if r != a:
                    adj[r].add(a)

    groups = [sorted(g) for g in members.values()] + fixed
    groups.sort(key=lambda g: g[0])
    labels = np.empty(L, dtype=int)
    for r, g in enumerate(groups):
        labels[g] = r
    return labels


def write_geojson(path, obj: dict) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")
