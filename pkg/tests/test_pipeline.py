import numpy as np
import pytest
from numpy.testing import assert_allclose

from tmo import (DataError, TMOConfig, build_keep_set, choose_threshold, cluster_variance, estimate_null_iqr,
                 fit_ols, hc_variance, normalize_residuals, pairwise_correlations, run_tmo, sandwich_variance)

from ._data import random_dataset


def test_run_tmo_is_composition_of_steps():
    ds = random_dataset(n=40, d=10, seed=1, factor=1.0)
    res = run_tmo(ds)
    rp = fit_ols(ds)
    pc = pairwise_correlations(normalize_residuals(rp))
    null = estimate_null_iqr(pc.stat)
    tc = choose_threshold(pc.stat, null, 40)
    v = sandwich_variance(rp, build_keep_set(pc, tc)).v_tmo
    assert res.report.v_tmo == v
    assert res.report.df_hat == null.df_hat
    assert res.threshold.delta_star == tc.delta_star
    assert res.report.delta_star_rho == pytest.approx(np.tanh(tc.delta_star))


def test_huge_threshold_is_hc0():
    ds = random_dataset(n=30, d=6, seed=2, factor=1.0)
    res = run_tmo(ds, TMOConfig(threshold=999.0))
    assert res.report.v_tmo == hc_variance(res.residuals, "hc0")
    assert res.keep_set.n_kept == 0


def test_cluster_augmentation_excludes_cluster_pairs_from_null():
    ds = random_dataset(n=30, d=8, seed=3, clusters=5, factor=0.8)
    res = run_tmo(ds, TMOConfig(augment=("cluster",), baselines=("hc1", "cluster"), reference="cluster"))
    ks = res.keep_set
    same = ks.never_threshold
    assert np.all(ks.kept[same])
    pc = res.pairs
    free = pc.valid & ~same
    null = estimate_null_iqr(pc.stat[free])
    assert res.null.v_hat == null.v_hat
    assert res.report.v_baselines["cluster"] == cluster_variance(res.residuals, ds.clusters)
    assert res.report.reference == "cluster"


def test_threshold_cluster_only_is_cluster_estimator():
    ds = random_dataset(n=30, d=8, seed=4, clusters=6)
    res = run_tmo(ds, TMOConfig(augment=("cluster",), threshold=1e6, baselines=("cluster",),
                                reference="cluster"))
    assert res.report.v_tmo == res.report.v_baselines["cluster"]
    assert res.report.se_ratios["cluster"] == 1.0


def test_distance_augmentation_needs_coords():
    ds = random_dataset(n=20, d=4)
    with pytest.raises(DataError):
        run_tmo(ds, TMOConfig(augment=("distance",), bandwidth_miles=100.0))


def test_precomputed_pairs_identical():
    ds = random_dataset(n=25, d=6, seed=5, factor=1.0)
    a = run_tmo(ds)
    b = run_tmo(ds, pairs=a.pairs)
    assert a.report.to_json() == b.report.to_json()


def test_panel_pipeline_runs_pooled():
    ds = random_dataset(n=25, d=4, t=3, seed=6)
    res = run_tmo(ds)
    assert res.pairs.n_slots == 12
    assert np.isfinite(res.report.se_tmo)


def test_raw_scale_pipeline():
    ds = random_dataset(n=30, d=10, seed=7, factor=1.0)
    res = run_tmo(ds, TMOConfig(scale="raw"))
    assert res.threshold.scale == "raw"
    assert res.report.delta_star_rho == res.threshold.delta_star


def test_binned_null_pipeline():
    ds = random_dataset(n=80, d=20, seed=8)
    res = run_tmo(ds, TMOConfig(null_method="binned"))
    assert res.null.method.startswith("binned")
    iqr = run_tmo(ds).null.v_hat
    assert_allclose(res.null.v_hat, iqr, rtol=0.2)


def test_config_validation():
    with pytest.raises(ValueError):
        TMOConfig(threshold=-1.0)
    with pytest.raises(ValueError):
        TMOConfig(augment=("state",))
