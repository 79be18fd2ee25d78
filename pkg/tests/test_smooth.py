import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from spatial_iml.errors import ConfigError
from spatial_iml.smooth import (Basis, KnotDegeneracyError, SmoothSpec, bspline_basis,
                                bspline_design, ci_band, fit_pls, fit_univariate, gcv_score,
                                quantile_knots, select_univariate, tensor_basis)

from oracles import cox_de_boor


def test_degree_zero_indicator():
    knots = np.array([0.0, 0.5, 1.0])
    B = bspline_design([0.1, 0.4, 0.6, 0.99], knots, 0)
    assert np.array_equal(B, [[1, 0], [1, 0], [0, 1], [0, 1]])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=30, max_size=80, unique=True),
       st.sampled_from([5, 8, 12]))
def test_partition_of_unity(xs, ns):
    x = np.array(xs)
    B = bspline_basis(x, SmoothSpec("univariate", ns))
    assert np.allclose(B.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(B >= -1e-14)


def test_cubic_matches_cox_de_boor(rng):
    x = rng.uniform(0, 10, 200)
    knots = quantile_knots(x, 9, 3)
    pts = np.r_[knots[3:-3], rng.uniform(0, 10, 5)]
    B = bspline_design(pts, knots, 3)
    ref = np.array([[cox_de_boor(p, knots, 3, i) for i in range(9)] for p in pts])
    assert np.max(np.abs(B - ref)) < 1e-12


def test_tensor_dimensions_and_unity(rng):
    u, v = rng.uniform(size=300), rng.uniform(size=300)
    B, P = tensor_basis(u, v, SmoothSpec("tensor2d", (4, 5), lam=(1.0, 2.0)))
    assert B.shape == (300, 20)
    assert P.shape == (20, 20)
    assert np.allclose(B.sum(axis=1), 1.0)
    assert np.linalg.eigvalsh(P)[0] > -1e-10


def test_separable_tensor_fit_is_constant_in_v(rng):
    n = 600
    u, v = rng.uniform(size=n), rng.uniform(size=n)
    y = np.sin(2 * np.pi * u) + 0.1 * rng.standard_normal(n)
    spec = SmoothSpec("tensor2d", 6, lam=(0.1, 1e4))
    b = Basis.build(spec, u, v)
    fit = fit_pls([b.design(u, v)], [b.penalties()], y, None, [[0.1, 1e4]], [b])
    s = fit.smooths[0]
    inside = []
    for uu in np.linspace(0.05, 0.95, 7):
        vv = np.linspace(0.02, 0.98, 25)
        Bg = b.design(np.full_like(vv, uu), vv)
        est = Bg @ s.coefficients
        half = 1.96 * np.sqrt(np.einsum("ij,jk,ik->i", Bg, s.posterior_cov, Bg))
        inside.append(np.abs(est - est.mean()) <= half)
    # pointwise 95% bands: the v-constant surface lies inside almost everywhere
    assert np.mean(inside) >= 0.9


def test_large_lambda_collapses_to_line(rng):
    x = np.sort(rng.uniform(-2, 2, 300))
    y = np.sin(2 * x) + 0.2 * rng.standard_normal(300)
    fit = fit_univariate(x, y, lam=1e9, n_splines=12)
    line = np.polyval(np.polyfit(x, y, 1), x)
    assert np.max(np.abs(fit.fitted - line)) <= 1e-3


def test_saturated_basis_interpolates():
    x = np.linspace(0, 1, 12)
    y = np.cos(3 * x)
    fit = fit_univariate(x, y, lam=0.0, n_splines=12)
    assert np.sqrt(np.mean((fit.fitted - y) ** 2)) <= 1e-6


def test_zero_weight_row_has_no_influence(rng):
    x = rng.uniform(size=100)
    y = x ** 2 + 0.1 * rng.standard_normal(100)
    w = np.ones(100)
    w[17] = 0.0
    y2 = y.copy()
    y2[17] = 1e6
    keep = np.arange(100) != 17
    a = fit_univariate(x, y2, w, lam=1.0)
    b = fit_univariate(x[keep], y[keep], None, lam=1.0)
    assert np.max(np.abs(a.smooths[0].coefficients - b.smooths[0].coefficients)) < 1e-10
    assert a.intercept == pytest.approx(b.intercept, abs=1e-10)


def test_zero_residual_gcv():
    x = np.linspace(0, 1, 50)
    fit = fit_univariate(x, 2 * x + 1, lam=1.0, n_splines=8)
    assert gcv_score(fit) == pytest.approx(0.0, abs=1e-20)


def test_grid_argmin(rng):
    x = rng.uniform(size=200)
    y = np.sin(2 * np.pi * x) + 0.2 * rng.standard_normal(200)
    cell, best, scores = select_univariate(x, y)
    assert gcv_score(best) == pytest.approx(scores[cell])
    assert all(scores[cell] <= s for s in scores.values())


def test_gcv_choice_near_oracle_out_of_sample(rng):
    x = rng.uniform(size=500)
    y = np.sin(2 * np.pi * x) + 0.2 * rng.standard_normal(500)
    xt = rng.uniform(size=2000)
    yt = np.sin(2 * np.pi * xt) + 0.2 * rng.standard_normal(2000)

    def oos(fit):
        s = fit.smooths[0]
        return np.sqrt(np.mean((fit.intercept + s.evaluate(xt) - yt) ** 2))

    cells = [(lam, ns) for lam in (0.001, 0.01, 0.1, 1, 10, 100, 1000) for ns in (5, 8, 12, 20)]
    errs = {c: oos(fit_univariate(x, y, lam=c[0], n_splines=c[1])) for c in cells}
    chosen, fit, _ = select_univariate(x, y)
    assert oos(fit) <= 1.1 * min(errs.values())


def test_ci_level_quantile():
    assert norm.ppf(0.975) == pytest.approx(1.95996, abs=1e-5)


def test_ci_noiseless_saturated():
    # the cubic basis reproduces x**3 exactly, so the residual variance is zero
    x = np.linspace(0, 1, 40)
    fit = fit_univariate(x, x ** 3, lam=0.0, n_splines=8)
    est, lo, hi, _ = ci_band(fit.smooths[0], np.linspace(0, 1, 30))
    assert np.max(hi - est) <= 1e-6


def test_ci_bad_level(rng):
    x = rng.uniform(size=50)
    fit = fit_univariate(x, x, lam=1.0)
    with pytest.raises(ConfigError):
        ci_band(fit.smooths[0], [0.5], level=1.0)


def test_band_coverage_monte_carlo():
    grid = np.linspace(0.05, 0.95, 50)
    hits = []
    for rep in range(200):
        r = np.random.default_rng(rep)
        x = r.uniform(size=300)
        y = np.sin(2 * np.pi * x) + 0.2 * r.standard_normal(300)
        _, fit, _ = select_univariate(x, y)
        est, lo, hi, _ = ci_band(fit.smooths[0], grid)
        truth = np.sin(2 * np.pi * grid)
        truth_c = truth - np.mean(np.sin(2 * np.pi * x))
        hits.append(np.mean((lo <= truth_c) & (truth_c <= hi)))
    assert np.mean(hits) >= 0.90


def test_shift_equivariance(rng):
    x = rng.uniform(size=150)
    y = np.cos(4 * x) + 0.1 * rng.standard_normal(150)
    a = fit_univariate(x, y, lam=1.0)
    b = fit_univariate(x, y + 7.5, lam=1.0)
    assert np.allclose(a.smooths[0].coefficients, b.smooths[0].coefficients, atol=1e-9)
    assert b.intercept - a.intercept == pytest.approx(7.5)


def test_weight_scale_invariance(rng):
    x = rng.uniform(size=150)
    y = np.cos(4 * x) + 0.1 * rng.standard_normal(150)
    w = rng.uniform(0.2, 1.0, 150)
    a = fit_univariate(x, y, w, lam=1.0)
    b = fit_univariate(x, y, 2 * w, lam=1.0)
    assert np.allclose(a.smooths[0].coefficients, b.smooths[0].coefficients, atol=1e-12)


def test_centering_and_edf_bounds(rng):
    x1, x2 = rng.uniform(size=(2, 200))
    y = np.sin(3 * x1) + x2 ** 2 + 0.1 * rng.standard_normal(200)
    spec = SmoothSpec("univariate", 8)
    bases = [Basis.build(spec, c) for c in (x1, x2)]
    fit = fit_pls([b.design(c) for b, c in zip(bases, (x1, x2))],
                  [b.penalties() for b in bases], y, None, [0.5, 0.5], bases)
    for s, c in zip(fit.smooths, (x1, x2)):
        assert abs(s.evaluate(c).sum()) < 1e-8
        assert 0 <= s.edf <= 8
        assert np.linalg.eigvalsh(s.penalty)[0] > -1e-10
    assert 0 <= fit.edf <= 1 + 2 * 8


def test_knot_degeneracy():
    with pytest.raises(KnotDegeneracyError):
        quantile_knots(np.array([1.0, 1.0, 2.0, 2.0]), 8)
    with pytest.raises(ConfigError):
        SmoothSpec("univariate", 3)
