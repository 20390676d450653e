import numpy as np
import pytest
from numpy.testing import assert_allclose

from tmo import DataError, NumericalError, dataset_from_arrays, fit, fit_iv_second_stage, fit_ols, fit_wls

from ._data import random_dataset
from ._oracles import ols_normal_equations


def test_exact_fit():
    w = np.array([0.0, 1.0, 2.0, 3.0, 5.0])
    aux = np.random.default_rng(0).standard_normal((5, 2))
    rp = fit_ols(dataset_from_arrays(2 * w, aux, w))
    assert_allclose(rp.tau_hat, 2.0, rtol=1e-14)
    assert_allclose(rp.eps0, 0.0, atol=1e-14)


def test_orthogonal_outcome():
    w = np.array([-1.0, 1.0, -1.0, 1.0])
    y = np.array([1.0, 1.0, -1.0, -1.0])
    rp = fit_ols(dataset_from_arrays(y, np.eye(4)[:, :2], w))
    assert abs(rp.tau_hat) < 1e-15


def test_n5_one_covariate_normal_equations():
    y = np.array([1.0, 3.0, 2.0, 5.0, 4.0])
    w = np.array([0.0, 1.0, 0.0, 1.0, 1.0])
    x = np.array([2.0, 1.0, 4.0, 3.0, 0.5])
    aux = np.column_stack([x ** 2, y - x])
    rp = fit_ols(dataset_from_arrays(y, aux, w, x))
    b, e = ols_normal_equations(y, [w, x])
    assert_allclose(rp.tau_hat, b[1], rtol=1e-10)
    assert_allclose(rp.eps0[:, 0], e, atol=1e-12)
    for j in range(2):
        bj, ej = ols_normal_equations(aux[:, j], [w, x])
        assert_allclose(rp.tau_aux[j], bj[1], rtol=1e-10)
        assert_allclose(rp.eps_aux[:, 0, j], ej, atol=1e-12)


def test_residual_orthogonality_and_fwl():
    ds = random_dataset(n=40, d=5, k=3, seed=4)
    rp = fit_ols(ds)
    x = ds.x[:, 0, :]
    eps = np.column_stack([rp.eps0[:, 0], rp.eps_aux[:, 0, :]])
    design = np.column_stack([np.ones(40), ds.w[:, 0], x])
    norms = np.linalg.norm(eps, axis=0) * np.linalg.norm(design, axis=0)[:, None]
    assert np.all(np.abs(design.T @ eps) <= 1e-8 * norms)
    wt = rp.w_tilde[:, 0]
    assert_allclose(rp.s_n, wt @ wt, rtol=1e-12)
    assert_allclose(rp.tau_hat, wt @ ds.y0[:, 0] / rp.s_n, rtol=1e-10)
    assert_allclose(rp.tau_aux, wt @ ds.aux[:, 0, :] / rp.s_n, rtol=1e-10)


def test_translation_invariance_in_covariates():
    ds = random_dataset(n=25, d=3, k=2, seed=8)
    a = fit_ols(ds)
    b = fit_ols(ds.replace(x=ds.x + np.array([3.0, -7.0])))
    assert_allclose(b.eps0, a.eps0, atol=1e-10)
    assert_allclose(b.eps_aux, a.eps_aux, atol=1e-10)


def test_rank_deficiency_names_columns():
    ds = random_dataset(n=20, d=2, k=2, seed=1)
    x = ds.x.copy()
    x[:, :, 1] = 2 * x[:, :, 0]
    with pytest.raises(NumericalError, match="x"):
        fit_ols(ds.replace(x=x))


def test_too_few_observations():
    ds = random_dataset(n=4, d=2, k=2, seed=1)
    with pytest.raises(DataError):
        fit_ols(ds)


def test_wls_equal_weights_is_ols():
    ds = random_dataset(n=30, d=4, k=1, seed=2)
    a = fit_ols(ds)
    b = fit_wls(ds.replace(weights=np.full((30, 1), 3.0)))
    assert_allclose(b.tau_hat, a.tau_hat, rtol=1e-12)
    assert_allclose(b.eps_aux, a.eps_aux, atol=1e-12)
    # score weights carry the weights, so the sandwich ratio is unchanged
    assert_allclose(b.w_tilde / b.s_n, a.w_tilde / a.s_n, rtol=1e-12)


def test_wls_normal_equations():
    y = np.array([1.0, 2.5, 2.0, 4.0])
    w = np.array([0.0, 1.0, 0.0, 1.0])
    x = np.array([1.0, 0.0, 2.0, 3.0])
    h = np.array([1.0, 2.0, 1.0, 2.0])
    aux = np.column_stack([x + y, y * y])
    rp = fit_wls(dataset_from_arrays(y, aux, w + 0.1 * x * x, x, weights=h))
    b, e = ols_normal_equations(y, [w + 0.1 * x * x, x], h)
    assert_allclose(rp.tau_hat, b[1], rtol=1e-10)
    assert_allclose(rp.eps0[:, 0], e, atol=1e-12)


def test_wls_tiny_weight_drops_unit():
    ds = random_dataset(n=15, d=3, k=1, seed=6)
    h = np.ones((15, 1))
    h[4] = 1e-12
    rp = fit_wls(ds.replace(weights=h))
    keep = np.arange(15) != 4
    b, _ = ols_normal_equations(ds.y0[keep, 0], [ds.w[keep, 0], ds.x[keep, 0, 0]])
    assert abs(rp.tau_hat - b[1]) < 1e-6


def test_wls_sandwich_weights():
    ds = random_dataset(n=20, d=2, seed=3, weights=True)
    rp = fit_wls(ds)
    h = ds.weights[:, 0]
    wr = rp.w_tilde[:, 0] / h
    assert_allclose(rp.s_n, np.sum(h * wr * wr), rtol=1e-12)


def test_nonpositive_weight_rejected():
    with pytest.raises(DataError):
        fit_wls(random_dataset(n=10))


def test_iv_exact_instrument_is_ols():
    ds = random_dataset(n=30, d=3, k=1, seed=9)
    a = fit_ols(ds)
    b = fit_iv_second_stage(ds, instrument=ds.w)
    assert_allclose(b.tau_hat, a.tau_hat, rtol=1e-12)
    assert_allclose(b.eps0, a.eps0, atol=1e-12)


def test_iv_two_step_hand_computation():
    z = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    w = np.array([1.2, 1.9, 3.4, 3.8, 5.5, 5.9])
    y = np.array([2.0, 4.5, 5.9, 8.3, 10.1, 12.2])
    aux = np.column_stack([z * w, y - w])
    rp = fit_iv_second_stage(dataset_from_arrays(y, aux, w, instrument=z))
    pi, _ = ols_normal_equations(w, [z])
    what = pi[0] + pi[1] * z
    b, _ = ols_normal_equations(y, [what])
    assert_allclose(rp.tau_hat, b[1], rtol=1e-10)
    assert_allclose(rp.eps0[:, 0], y - b[0] - b[1] * w, atol=1e-10)
    assert rp.first_stage_f > 10


def test_iv_weak_instrument_warns():
    rng = np.random.default_rng(0)
    n = 40
    w = rng.standard_normal(n)
    z = rng.standard_normal(n)
    z -= (z @ (w - w.mean())) / ((w - w.mean()) @ (w - w.mean())) * (w - w.mean())
    z += 1e-3 * w
    ds = dataset_from_arrays(rng.standard_normal(n), rng.standard_normal((n, 3)), w, instrument=z)
    rp = fit(ds)
    assert rp.method == "iv"
    assert rp.first_stage_f < 10
    assert any(r["code"] == "weak_instrument" for r in rp.warnings)


def test_fixed_effects_within_matches_indicators():
    rng = np.random.default_rng(5)
    n = 60
    fe = np.column_stack([rng.integers(0, 6, n), rng.integers(0, 4, n)])
    base = random_dataset(n=n, d=4, k=1, seed=5)
    ds = dataset_from_arrays(base.y0[:, 0] + fe[:, 0], base.aux[:, 0, :], base.w[:, 0] + 0.3 * fe[:, 1],
                             base.x[:, 0, :], fe=fe)
    a = fit_ols(ds, fe_method="indicators")
    b = fit_ols(ds, fe_method="within")
    assert_allclose(b.tau_hat, a.tau_hat, rtol=1e-8)
    assert_allclose(b.eps_aux, a.eps_aux, atol=1e-8)
    assert a.n_params == b.n_params
    # indicator path against an explicit dummy design
    dummies = [(fe[:, 0] == g).astype(float) for g in range(1, 6)]
    dummies += [(fe[:, 1] == g).astype(float) for g in range(1, 4)]
    coef, e = ols_normal_equations(ds.y0[:, 0], [ds.w[:, 0], ds.x[:, 0, 0]] + dummies)
    assert_allclose(a.tau_hat, coef[1], rtol=1e-10)
    assert_allclose(a.eps0[:, 0], e, atol=1e-10)


def test_panel_stacks_observations():
    ds = random_dataset(n=12, d=3, t=3, k=1, seed=7)
    rp = fit_ols(ds)
    y = ds.y0.ravel()
    b, e = ols_normal_equations(y, [ds.w.ravel(), ds.x[:, :, 0].ravel()])
    assert_allclose(rp.tau_hat, b[1], rtol=1e-10)
    assert_allclose(rp.eps0.ravel(), e, atol=1e-12)
    assert rp.n_obs == 36
