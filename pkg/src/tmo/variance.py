"""Sandwich variance estimators built from a set of retained unit pairs.

All estimators share one form.  With per-unit scores
``g_i = sum_s w_tilde[i, s] * eps0[i, s]``,

    V = s_n^-2 * ( sum_i g_i^2 + 2 * sum_{(i, j) kept} k_ij * g_i * g_j ),

where ``k_ij`` is 1 except for kernel-weighted distance pairs.  HC0 keeps
no pairs, cluster-robust keeps same-cluster pairs, the uniform distance
kernel keeps pairs within the bandwidth, and the thresholded estimator keeps
pairs whose correlation statistic clears the cutoff (plus any pairs that are
never thresholded).
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .correlation import PairCorrelations, condensed_to_pairs, n_pairs
from .errors import DataError
from .null_threshold import ThresholdChoice
from .regression import ResidualPanel

__all__ = [
    "EARTH_RADIUS_MILES",
    "KeepSet",
    "VarianceReport",
    "MethodConfig",
    "haversine_miles",
    "pair_distances_miles",
    "cluster_pairs",
    "build_keep_set",
    "sandwich_variance",
    "hc_variance",
    "cluster_variance",
    "distance_kernel_variance",
    "scpc_augmented_variance",
    "compare_methods",
]

EARTH_RADIUS_MILES = 3958.7613
PAIR_CHUNK = 1 << 18

SOURCE_NONE, SOURCE_THRESHOLD, SOURCE_CLUSTER, SOURCE_DISTANCE, SOURCE_FORCED = range(5)
SOURCE_NAMES = ("none", "threshold", "cluster", "distance", "forced")


@dataclass(frozen=True)
class KeepSet:
    """Retained pairs in condensed order.

    ``never_threshold`` marks the pairs exempt from thresholding; ``weight``
    (if given) is the covariance weight applied to each kept pair.
    """

    n: int
    kept: np.ndarray
    source: np.ndarray
    never_threshold: np.ndarray
    weight: np.ndarray | None = None

    @property
    def n_kept(self) -> int:
        return int(np.count_nonzero(self.kept))

    def kept_fraction_thresholded(self) -> float:
        """Share of pairs outside the never-threshold set that were retained."""
        free = ~self.never_threshold
        total = int(np.count_nonzero(free))
        return float(np.count_nonzero(self.kept & free) / total) if total else 0.0

    @classmethod
    def empty(cls, n: int) -> "KeepSet":
        m = n_pairs(n)
        return cls(n, np.zeros(m, bool), np.zeros(m, np.int8), np.zeros(m, bool))

    @classmethod
    def from_mask(cls, mask, source: int = SOURCE_FORCED, never_threshold: bool = True) -> "KeepSet":
        mask = np.asarray(mask, dtype=bool)
        n = int(round((1 + math.sqrt(1 + 8 * mask.size)) / 2))
        src = np.where(mask, source, SOURCE_NONE).astype(np.int8)
        return cls(n, mask, src, mask.copy() if never_threshold else np.zeros_like(mask))


def haversine_miles(lat1, lon1, lat2, lon2):
    """Great-circle distance in miles between points given in degrees."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_MILES * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def _check_coords(coords):
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DataError("coords must have shape (n, 2)", "variance")
    if not (np.all(np.isfinite(coords)) and np.all(np.abs(coords[:, 0]) <= 90)
            and np.all(np.abs(coords[:, 1]) <= 180)):
        raise DataError("invalid coordinates", "variance")
    return coords


def pair_distances_miles(coords) -> np.ndarray:
    """Condensed vector of great-circle distances between all unit pairs."""
    coords = _check_coords(coords)
    n = coords.shape[0]
    out = np.empty(n_pairs(n))
    for i in range(n - 1):
        start = i * n - i * (i + 1) // 2
        out[start:start + n - i - 1] = haversine_miles(coords[i, 0], coords[i, 1],
                                                       coords[i + 1:, 0], coords[i + 1:, 1])
    return out


def cluster_pairs(clusters) -> np.ndarray:
    """Condensed mask of same-cluster pairs."""
    labels = np.asarray(clusters)
    codes = np.unique(labels, return_inverse=True)[1].ravel()
    i, j = np.triu_indices(codes.size, 1)
    return codes[i] == codes[j]


def _kernel_weights(dist, bandwidth, kernel):
    if not bandwidth > 0:
        raise DataError("bandwidth must be positive", "variance")
    u = dist / bandwidth
    if kernel == "uniform":
        return (u <= 1.0).astype(float)
    if kernel == "bartlett":
        return np.maximum(1.0 - u, 0.0)
    raise ValueError(f"unknown kernel {kernel!r}")


def build_keep_set(
    pc: PairCorrelations | None,
    tc: ThresholdChoice | None,
    clusters=None,
    coords=None,
    bandwidth_miles: float | None = None,
    kernel: str = "uniform",
    n: int | None = None,
) -> KeepSet:
    """Union of the never-threshold set (same cluster / within bandwidth) and
    the pairs whose statistic clears the cutoff.

    Pass ``tc=None`` to keep only the never-threshold set.
    """
    if pc is not None:
        n = pc.n
    if n is None:
        raise ValueError("need pc or n")
    m = n_pairs(n)
    source = np.zeros(m, np.int8)
    never = np.zeros(m, bool)
    weight = None
    if bandwidth_miles is not None:
        if coords is None:
            raise DataError("distance augmentation requested but no coordinates", "variance")
        kw = _kernel_weights(pair_distances_miles(coords), bandwidth_miles, kernel)
        near = kw > 0
        never |= near
        source[near] = SOURCE_DISTANCE
        if kernel != "uniform":
            weight = np.where(near, kw, 1.0)
    if clusters is not None:
        if len(clusters) != n:
            raise DataError("one cluster label per unit required", "variance")
        same = cluster_pairs(clusters)
        never |= same
        source[same] = SOURCE_CLUSTER
        if weight is not None:
            weight[same] = 1.0
    kept = never.copy()
    if tc is not None:
        if pc is None:
            raise ValueError("thresholding needs pair correlations")
        if tc.scale != pc.scale:
            raise ValueError(f"threshold scale {tc.scale!r} != pair scale {pc.scale!r}")
    if tc is not None and tc.retains_pairs:
        with np.errstate(invalid="ignore"):
            thr = pc.valid & (np.abs(pc.stat) >= tc.delta_star) & ~never
        kept |= thr
        source[thr] = SOURCE_THRESHOLD
    return KeepSet(n, kept, source, never, weight)


def _pair_sum(g, ks: KeepSet, workers: int = 1) -> float:
    idx = np.flatnonzero(ks.kept)
    if idx.size == 0:
        return 0.0
    chunks = [idx[s:s + PAIR_CHUNK] for s in range(0, idx.size, PAIR_CHUNK)]

    def part(c):
        i, j = condensed_to_pairs(c, ks.n)
        prod = g[i] * g[j]
        if ks.weight is not None:
            prod = prod * ks.weight[c]
        return np.sum(prod)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            partials = list(ex.map(part, chunks))
    else:
        partials = [part(c) for c in chunks]
    return float(np.sum(np.array(partials)))


def _se(v):
    return math.sqrt(v) if v >= 0 else float("nan")


@dataclass
class VarianceReport:
    tau_hat: float
    v_tmo: float
    se_tmo: float
    kept_fraction: float
    negative_variance_flag: bool
    n_kept_pairs: int = 0
    v_baselines: dict = field(default_factory=dict)
    se_baselines: dict = field(default_factory=dict)
    se_ratios: dict = field(default_factory=dict)
    reference: str | None = None
    delta_star: float | None = None
    delta_star_rho: float | None = None
    bonferroni_delta: float | None = None
    df_hat: float | None = None
    scale: str | None = None
    status: str = "ok"
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)

    def to_table(self) -> str:
        """Aligned text with one row per method."""
        lines = [f"{'method':<12}{'coef':>12}{'SE':>12}{'ratio':>10}"]
        ref = self.reference
        lines.append(f"{'tmo':<12}{self.tau_hat:>12.6g}{self.se_tmo:>12.6g}"
                     f"{self.se_ratios.get(ref, float('nan')) if ref else float('nan'):>10.4f}")
        for name, se in self.se_baselines.items():
            lines.append(f"{name:<12}{self.tau_hat:>12.6g}{se:>12.6g}{'':>10}")
        lines.append("")
        for label, val in (("delta*", self.delta_star), ("delta* (rho)", self.delta_star_rho),
                           ("bonferroni", self.bonferroni_delta), ("df_hat", self.df_hat)):
            if val is not None:
                lines.append(f"{label:<14}{val:.6g}")
        lines.append(f"{'kept %':<14}{100 * self.kept_fraction:.4g}")
        if self.negative_variance_flag:
            lines.append("WARNING: negative TMO variance")
        return "\n".join(lines) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def sandwich_variance(rp: ResidualPanel, ks: KeepSet, workers: int = 1) -> VarianceReport:
    """Thresholded sandwich variance for the kept pairs.

    Panels aggregate each unit's periods into one score, so correlation is
    allowed across periods within a unit and across units and periods for
    kept pairs.
    """
    if not rp.s_n > 0:
        raise DataError("s_n must be positive", "variance")
    if ks.n != rp.n:
        raise DataError(f"keep set has {ks.n} units, residuals have {rp.n}", "variance")
    g = rp.unit_scores()
    v = (np.sum(g * g) + 2.0 * _pair_sum(g, ks, workers)) / rp.s_n ** 2
    v = float(v)
    return VarianceReport(
        tau_hat=rp.tau_hat,
        v_tmo=v,
        se_tmo=_se(v),
        kept_fraction=ks.kept_fraction_thresholded(),
        negative_variance_flag=v < 0,
        n_kept_pairs=ks.n_kept,
    )


def hc_variance(rp: ResidualPanel, correction: str = "hc0") -> float:
    """Heteroskedasticity-robust variance, one term per observation."""
    g = (rp.w_tilde * rp.eps0).ravel()
    v0 = float(np.sum(g * g) / rp.s_n ** 2)
    if correction == "hc0":
        return v0
    if correction == "hc1":
        n_obs = rp.n_obs
        if n_obs <= rp.n_params:
            raise DataError("HC1 needs more observations than parameters", "variance")
        return v0 * n_obs / (n_obs - rp.n_params)
    raise ValueError(f"unknown correction {correction!r}")


def cluster_variance(rp: ResidualPanel, clusters, small_sample: bool = False, workers: int = 1) -> float:
    """Cluster-robust variance (the sandwich over all same-cluster pairs).

    ``small_sample`` applies ``G/(G-1) * (N-1)/(N-K)``.
    """
    clusters = np.asarray(clusters)
    n_groups = np.unique(clusters).size
    if n_groups < 2:
        raise DataError("cluster-robust variance needs at least 2 clusters", "variance")
    ks = build_keep_set(None, None, clusters=clusters, n=rp.n)
    v = sandwich_variance(rp, ks, workers).v_tmo
    if small_sample:
        n_obs = rp.n_obs
        v *= n_groups / (n_groups - 1) * (n_obs - 1) / (n_obs - rp.n_params)
    return v


def distance_kernel_variance(rp: ResidualPanel, coords, bandwidth_miles: float,
                             kernel: str = "uniform", workers: int = 1) -> float:
    """Conley-type variance with a uniform or Bartlett kernel in great-circle miles."""
    ks = build_keep_set(None, None, coords=coords, bandwidth_miles=bandwidth_miles,
                        kernel=kernel, n=rp.n)
    return sandwich_variance(rp, ks, workers).v_tmo


def scpc_augmented_variance(rp: ResidualPanel, ks: KeepSet, basis) -> float:
    """Combine externally supplied spatial principal-component vectors with a keep set.

    ``basis`` holds ``q`` vectors ``r_j`` (shape ``(q, n)``).  Off-diagonal
    pairs outside the keep set enter through the projected term
    ``q^-1 sum_j sum_{(i,i') not kept} r_ji r_ji' g_i g_i'``; the kept pairs and the
    diagonal enter through the sandwich.
    """
    r = np.atleast_2d(np.asarray(basis, dtype=float))
    if r.shape[1] != rp.n:
        raise DataError("basis vectors must have length n", "variance")
    g = rp.unit_scores()
    total = 0.0
    for rj in r:
        u = rj * g
        all_off = np.sum(u) ** 2 - np.sum(u * u)
        kept_off = 2.0 * _pair_sum(u, ks)
        total += all_off - kept_off
    v_scpc = total / (r.shape[0] * rp.s_n ** 2)
    return float(v_scpc + sandwich_variance(rp, ks).v_tmo)


@dataclass(frozen=True)
class MethodConfig:
    """Which baselines to compute and which one the ratios are taken against.

    ``augment`` names the never-threshold sets (``"cluster"``, ``"distance"``)
    added to the thresholded keep set; baselines use the inputs regardless.
    """

    baselines: tuple = ("hc0", "hc1")
    reference: str = "hc1"
    clusters: np.ndarray | None = None
    coords: np.ndarray | None = None
    bandwidth_miles: float | None = None
    kernel: str = "uniform"
    cluster_small_sample: bool = False
    augment: tuple = ()


def compare_methods(rp: ResidualPanel, pc: PairCorrelations | None, tc: ThresholdChoice | None,
                    config: MethodConfig, ks: KeepSet | None = None, workers: int = 1) -> VarianceReport:
    """Thresholded variance plus each requested baseline and the SE ratios."""
    if ks is None:
        dist = "distance" in config.augment
        ks = build_keep_set(pc, tc, config.clusters if "cluster" in config.augment else None,
                            config.coords if dist else None,
                            config.bandwidth_miles if dist else None, config.kernel, n=rp.n)
    rep = sandwich_variance(rp, ks, workers)
    for name in config.baselines:
        if name in ("hc0", "hc1"):
            v = hc_variance(rp, name)
        elif name == "cluster":
            if config.clusters is None:
                raise DataError("cluster baseline requested without cluster labels", "variance")
            v = cluster_variance(rp, config.clusters, config.cluster_small_sample, workers)
        elif name == "conley":
            if config.coords is None or config.bandwidth_miles is None:
                raise DataError("conley baseline needs coordinates and a bandwidth", "variance")
            v = distance_kernel_variance(rp, config.coords, config.bandwidth_miles,
                                         config.kernel, workers)
        else:
            raise DataError(f"unknown baseline {name!r}", "variance")
        rep.v_baselines[name] = v
        rep.se_baselines[name] = _se(v)
        rep.se_ratios[name] = rep.se_tmo / _se(v) if v > 0 else float("nan")
    rep.reference = config.reference if config.reference in rep.v_baselines else None
    if tc is not None:
        rep.delta_star = tc.delta_star
        rep.delta_star_rho = math.tanh(tc.delta_star) if tc.scale == "fisher" else tc.delta_star
        rep.bonferroni_delta = tc.bonferroni_delta
        rep.scale = tc.scale
        rep.status = tc.status
    return rep
