"""End-to-end thresholded variance: residualize, correlate, fit the null, pick the cutoff, sum."""
from __future__ import annotations

from dataclasses import dataclass, field

from ._log import warn
from .correlation import PairCorrelations, normalize_residuals, pairwise_correlations
from .dataset_io import RegressionDataset
from .errors import DataError
from .null_threshold import (NullModel, ThresholdChoice, choose_threshold, estimate_null_binned,
                             estimate_null_iqr, fixed_threshold)
from .regression import ResidualPanel, fit
from .variance import KeepSet, MethodConfig, VarianceReport, build_keep_set, compare_methods

__all__ = ["TMOConfig", "TMOResult", "run_tmo", "fit_null"]


@dataclass(frozen=True)
class TMOConfig:
    """Options for :func:`run_tmo`.

    ``augment`` lists the never-threshold sets: ``"cluster"`` keeps every
    same-cluster pair and ``"distance"`` every pair within ``bandwidth_miles``.
    Those pairs are also left out when fitting the null and choosing the cutoff.
    """

    null_method: str = "iqr"
    scale: str = "fisher"
    threshold: float | None = None
    binned_trim: float = 0.25
    binned_distance: str = "L2"
    binned_fit: str = "density"
    augment: tuple = ()
    baselines: tuple = ("hc0", "hc1")
    reference: str = "hc1"
    bandwidth_miles: float | None = None
    kernel: str = "uniform"
    cluster_small_sample: bool = False
    fe_method: str = "auto"
    workers: int = 1

    def __post_init__(self):
        if self.threshold is not None and not self.threshold > 0:
            raise ValueError("threshold override must be positive")
        if self.scale not in ("fisher", "raw"):
            raise ValueError("scale must be 'fisher' or 'raw'")
        if self.null_method not in ("iqr", "binned"):
            raise ValueError("null_method must be 'iqr' or 'binned'")
        bad = set(self.augment) - {"cluster", "distance"}
        if bad:
            raise ValueError(f"unknown augmentation {sorted(bad)}")


@dataclass
class TMOResult:
    residuals: ResidualPanel
    pairs: PairCorrelations
    null: NullModel
    threshold: ThresholdChoice
    keep_set: KeepSet
    report: VarianceReport
    records: list = field(default_factory=list)


def fit_null(stats, config: TMOConfig) -> NullModel:
    if config.null_method == "iqr":
        return estimate_null_iqr(stats, config.scale)
    return estimate_null_binned(stats, config.binned_trim, config.binned_distance,
                                config.binned_fit, scale=config.scale)


def run_tmo(ds: RegressionDataset, config: TMOConfig = TMOConfig(),
            pairs: PairCorrelations | None = None, records: list | None = None) -> TMOResult:
    """Thresholded standard error for the treatment coefficient of ``ds``.

    ``pairs`` may hold precomputed pair correlations (e.g. from a saved
    pair table); they must match the dataset's unit count.
    """
    records = list(ds.warnings) if records is None else records
    rp = fit(ds, config.fe_method)
    if pairs is None:
        z = normalize_residuals(rp, records)
        pooling = "cross_section" if rp.t == 1 else "panel_pooled"
        pairs = pairwise_correlations(z, pooling, config.scale, config.workers, records)
    else:
        if pairs.n != rp.n:
            raise DataError(f"pair table has {pairs.n} units, dataset has {rp.n}", "pipeline")
        pairs = pairs.with_scale(config.scale)

    clusters = ds.clusters if "cluster" in config.augment or "cluster" in config.baselines else None
    coords = ds.coords
    if "cluster" in config.augment and clusters is None:
        raise DataError("cluster augmentation requested but the dataset has no clusters", "pipeline")
    if "distance" in config.augment and (coords is None or config.bandwidth_miles is None):
        raise DataError("distance augmentation needs coordinates and a bandwidth", "pipeline")

    aug = dict(clusters=clusters if "cluster" in config.augment else None,
               coords=coords if "distance" in config.augment else None,
               bandwidth_miles=config.bandwidth_miles if "distance" in config.augment else None,
               kernel=config.kernel)
    never = build_keep_set(None, None, n=rp.n, **aug)
    free = pairs.valid & ~never.never_threshold
    stats = pairs.stat[free]
    null = fit_null(stats, config)
    if config.threshold is None:
        tc = choose_threshold(stats, null, rp.n)
    else:
        tc = fixed_threshold(stats, null, config.threshold, rp.n)
    ks = build_keep_set(pairs, tc, **aug)
    mc = MethodConfig(baselines=tuple(config.baselines), reference=config.reference,
                      clusters=clusters, coords=coords, bandwidth_miles=config.bandwidth_miles,
                      kernel=config.kernel, cluster_small_sample=config.cluster_small_sample,
                      augment=tuple(config.augment))
    report = compare_methods(rp, pairs, tc, mc, ks=ks, workers=config.workers)
    report.df_hat = null.df_hat
    if report.negative_variance_flag:
        warn(records, "variance", "negative_variance", "thresholded variance is negative",
             v_tmo=report.v_tmo)
    report.notes = [r.get("code", "") for r in records]
    return TMOResult(rp, pairs, null, tc, ks, report, records)
