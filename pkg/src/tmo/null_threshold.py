"""Empirical-null fitting and the choice of the thresholding cutoff.

Most pairs of units are assumed uncorrelated, so the centre of the pair
statistic distribution is matched by a mean-zero Gaussian ``N(0, v)``.
The cutoff maximizes

    Q(delta) = F(delta) - 2 * F0(delta),   F0(delta) = 2 * (1 - Phi_v(delta)),

where ``F`` is the fraction of pairs with ``|stat| >= delta``.  ``Q`` grows
while lowering the cutoff admits more correlated pairs than null ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import NumericalError

__all__ = [
    "NullModel",
    "ThresholdChoice",
    "estimate_null_iqr",
    "estimate_null_binned",
    "empirical_right_cdf",
    "choose_threshold",
    "fixed_threshold",
    "Z75",
    "QUANTILE_METHOD",
]

Z75 = float(stats.norm.ppf(0.75))
# p/(n+1) plotting positions, interpolated linearly between order statistics
QUANTILE_METHOD = "weibull"
GRID_POINTS = 512
BONFERRONI_ALPHA = 0.05
MIN_IQR_STATS = 20
MIN_BINNED_STATS = 200
V_BOUNDS = (1e-8, 10.0)


@dataclass(frozen=True)
class NullModel:
    v_hat: float
    method: str = "iqr"
    scale: str = "fisher"

    def __post_init__(self):
        if not self.v_hat > 0:
            raise ValueError("v_hat must be positive")

    @property
    def df_hat(self) -> float:
        return 1.0 / self.v_hat

    @property
    def sd(self) -> float:
        return math.sqrt(self.v_hat)

    def right_tail(self, delta):
        """``F0(delta) = P(|N(0, v)| >= delta)``."""
        return 2.0 * stats.norm.sf(delta, scale=self.sd)


@dataclass(frozen=True)
class ThresholdChoice:
    delta_star: float
    q_curve: np.ndarray
    bonferroni_delta: float
    kept_fraction: float
    q_max: float
    status: str = "ok"
    scale: str = "fisher"
    p0: float = 1.0

    @property
    def retains_pairs(self) -> bool:
        return self.status != "no_pairs_retained"


def _finite(stats_):
    s = np.asarray(stats_, dtype=float).ravel()
    return s[np.isfinite(s)]


def estimate_null_iqr(pair_stats, scale: str = "fisher") -> NullModel:
    """Gaussian null whose interquartile range equals the empirical one."""
    s = _finite(pair_stats)
    if s.size < MIN_IQR_STATS:
        raise NumericalError(f"need at least {MIN_IQR_STATS} finite pair statistics, got {s.size}",
                             "null_threshold")
    q25, q75 = np.quantile(s, [0.25, 0.75], method=QUANTILE_METHOD)
    iqr = q75 - q25
    if not iqr > 0:
        raise NumericalError("degenerate interquartile range (IQR = 0)", "null_threshold")
    return NullModel((iqr / (2.0 * Z75)) ** 2, "iqr", scale)


def _golden_log(f, lo, hi, rtol):
    """Minimize ``f(v)`` over ``[lo, hi]`` by golden-section search in ``log v``."""
    a, b = math.log(lo), math.log(hi)
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(math.exp(c)), f(math.exp(d))
    while b - a > rtol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(math.exp(c))
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(math.exp(d))
    return math.exp((a + b) / 2.0)


def estimate_null_binned(
    pair_stats,
    trim_q: float = 0.25,
    distance: str = "L2",
    fit: str = "density",
    n_bins: int = 50,
    scale: str = "fisher",
) -> NullModel:
    """Fit ``v`` by matching binned empirical and Gaussian densities (or masses).

    Only statistics between the ``trim_q`` and ``1 - trim_q`` quantiles are
    binned; empirical bin heights are normalized by the full sample size so
    that they are comparable with the untruncated ``N(0, v)``.
    """
    if trim_q not in (0.1, 0.2, 0.25):
        raise ValueError("trim_q must be one of 0.1, 0.2, 0.25")
    norms = {"L1": lambda r: np.sum(np.abs(r)), "L2": lambda r: math.sqrt(np.sum(r * r)),
             "Linf": lambda r: np.max(np.abs(r))}
    if distance not in norms:
        raise ValueError("distance must be L1, L2 or Linf")
    if fit not in ("density", "mass"):
        raise ValueError("fit must be 'density' or 'mass'")
    s = _finite(pair_stats)
    lo, hi = np.quantile(s, [trim_q, 1.0 - trim_q], method=QUANTILE_METHOD)
    inside = s[(s >= lo) & (s <= hi)]
    if not hi > lo:
        raise NumericalError("degenerate statistics: trimmed range is empty", "null_threshold")
    if inside.size < MIN_BINNED_STATS:
        raise NumericalError(f"need at least {MIN_BINNED_STATS} statistics in the trimmed range",
                             "null_threshold")
    edges = np.linspace(lo, hi, n_bins + 1)
    counts, _ = np.histogram(inside, bins=edges)
    width = edges[1] - edges[0]
    total = s.size
    norm = norms[distance]
    if fit == "density":
        emp = counts / (total * width)
        mids = 0.5 * (edges[:-1] + edges[1:])

        def loss(v):
            return norm(emp - stats.norm.pdf(mids, scale=math.sqrt(v)))
    else:
        emp = counts / total

        def loss(v):
            return norm(emp - np.diff(stats.norm.cdf(edges, scale=math.sqrt(v))))

    # coarse scan picks the basin, golden section refines it
    grid = np.exp(np.linspace(math.log(V_BOUNDS[0]), math.log(V_BOUNDS[1]), 241))
    vals = np.array([loss(v) for v in grid])
    k = int(np.argmin(vals))
    if k == 0 or k == grid.size - 1:
        raise NumericalError("binned null fit hit the search bounds", "null_threshold")
    v = _golden_log(loss, grid[k - 1], grid[k + 1], 1e-6)
    return NullModel(v, f"binned-{fit}-{distance}-q{trim_q}", scale)


def empirical_right_cdf(pair_stats, delta):
    """Fraction of pairs with ``|stat| >= delta``; ``delta`` may be an array."""
    a = np.sort(np.abs(_finite(pair_stats)))
    delta = np.asarray(delta, dtype=float)
    out = (a.size - np.searchsorted(a, delta, side="left")) / a.size
    return float(out) if out.ndim == 0 else out


def choose_threshold(pair_stats, null: NullModel, n_units: int | None = None) -> ThresholdChoice:
    """Maximize ``Q`` over all observed ``|stat|`` values and a uniform grid.

    Ties go to the smallest cutoff.  If ``Q <= 0`` everywhere the cutoff is
    placed just above the largest statistic and no pair is retained.  The
    Bonferroni reference is ``Phi_v^-1(1 - 0.05 / n^2)``.
    """
    a = np.sort(np.abs(_finite(pair_stats)))
    m = a.size
    if m == 0:
        raise NumericalError("no finite pair statistics", "null_threshold")
    if n_units is None:
        n_units = int(round((1 + math.sqrt(1 + 8 * m)) / 2))
    # first occurrence of each distinct value: F = (m - index) / m
    first = np.flatnonzero(np.r_[True, a[1:] != a[:-1]])
    obs_delta = a[first]
    obs_q = (m - first) / m - 2.0 * null.right_tail(obs_delta)
    amax = a[-1]
    grid = np.linspace(0.0, amax, GRID_POINTS + 1)[1:] if amax > 0 else np.array([0.0])
    grid_q = empirical_right_cdf(a, grid) - 2.0 * null.right_tail(grid)

    k = int(np.argmax(obs_q))
    q_max = float(obs_q[k])
    g = int(np.argmax(grid_q))
    if grid_q[g] > q_max + 1e-12:
        # cannot happen: Q rises between observed values, so grid points never win
        raise NumericalError("grid maximum exceeds observed-value maximum", "null_threshold")
    bonf = float(stats.norm.ppf(1.0 - BONFERRONI_ALPHA / n_units ** 2, scale=null.sd))
    if q_max <= 0:
        delta = float(np.nextafter(amax, np.inf))
        status = "no_pairs_retained"
        kept = 0.0
    else:
        delta = float(obs_delta[k])
        status = "ok"
        kept = float((m - first[k]) / m)
    curve = np.column_stack([grid, grid_q])
    curve = np.vstack([curve, [delta, q_max if status == "ok" else float(
        empirical_right_cdf(a, delta) - 2.0 * null.right_tail(delta))]])
    curve = curve[np.argsort(curve[:, 0], kind="stable")]
    return ThresholdChoice(delta, curve, bonf, kept, q_max, status, null.scale)


def fixed_threshold(pair_stats, null: NullModel, delta: float, n_units: int | None = None) -> ThresholdChoice:
    """A user-supplied cutoff, with the Q curve and Bonferroni reference still reported."""
    if not delta > 0:
        raise ValueError("threshold override must be positive")
    auto = choose_threshold(pair_stats, null, n_units)
    kept = empirical_right_cdf(pair_stats, delta)
    q = kept - 2.0 * float(null.right_tail(delta))
    status = "override" if kept > 0 else "no_pairs_retained"
    return ThresholdChoice(float(delta), auto.q_curve, auto.bonferroni_delta, kept, q, status, null.scale)
