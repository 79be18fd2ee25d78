"""Independent reference implementations used by the test-suite."""

import itertools
import math

import numpy as np


def brute_force_shapley(predict, x, background):
    """Exact interventional Shapley values by enumerating all 2^p coalitions.

    The value of coalition S is the mean prediction over background rows with
    the features in S set to ``x``.
    """
    x = np.asarray(x, dtype=float)
    B = np.asarray(background, dtype=float)
    p = len(x)
    value = {}
    for r in range(p + 1):
        for S in itertools.combinations(range(p), r):
            Z = B.copy()
            Z[:, list(S)] = x[list(S)]
            value[S] = float(np.mean(predict(Z)))
    phi = np.zeros(p)
    for j in range(p):
        others = [k for k in range(p) if k != j]
        for r in range(p):
            w = math.factorial(r) * math.factorial(p - r - 1) / math.factorial(p)
            for S in itertools.combinations(others, r):
                Sj = tuple(sorted(S + (j,)))
                phi[j] += w * (value[Sj] - value[S])
    return phi, value[()]


def cox_de_boor(x, knots, degree, i):
    """B-spline basis function B_{i,degree}(x) by the textbook recursion
    (right-closed at the final knot)."""
    t = knots
    if degree == 0:
        if t[i] <= x < t[i + 1]:
            return 1.0
        if x == t[-1] and t[i] < t[i + 1] == t[-1]:
            return 1.0
        return 0.0
    left = 0.0
    if t[i + degree] != t[i]:
        left = (x - t[i]) / (t[i + degree] - t[i]) * cox_de_boor(x, t, degree - 1, i)
    right = 0.0
    if t[i + degree + 1] != t[i + 1]:
        right = ((t[i + degree + 1] - x) / (t[i + degree + 1] - t[i + 1])
                 * cox_de_boor(x, t, degree - 1, i + 1))
    return left + right


def dense_wls(X, y, w):
    """``(X' W X)^-1 X' W y`` with an explicit inverse."""
    W = np.diag(w)
    return np.linalg.inv(X.T @ W @ X) @ X.T @ W @ y


def bisquare(d, D):
    return (1 - (d / D) ** 2) ** 2 if d < D else 0.0


def gwr_oracle(coords, X, y, b):
    """Single-pass GWR: one dense weighted solve per location with an adaptive
    bisquare kernel whose support is the b-th nearest distance (self included)."""
    coords = np.asarray(coords, float)
    L = len(y)
    out = np.zeros((L, X.shape[1]))
    for i in range(L):
        d = np.sqrt(((coords - coords[i]) ** 2).sum(axis=1))
        D = np.sort(d)[b - 1]
        w = np.array([bisquare(dl, D) for dl in d])
        out[i] = dense_wls(X, y, w)
    return out
