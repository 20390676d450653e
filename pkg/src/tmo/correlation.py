"""Cross-outcome residual covariances and correlations between every pair of units.

Pair quantities are stored in condensed upper-triangular order: pair
``(i, j)`` with ``i < j`` lives at index ``i*n - i*(i+1)/2 + (j - i - 1)``,
which is the order of ``np.triu_indices(n, 1)``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._log import warn
from .errors import DataError
from .regression import ResidualPanel

__all__ = [
    "PairCorrelations",
    "normalize_residuals",
    "pairwise_correlations",
    "fisher_transform",
    "pair_index",
    "condensed_to_pairs",
    "n_pairs",
    "save_pairs",
    "load_pairs",
]

FISHER_CLAMP = 1.0 - 1e-12
BLOCK_ROWS = 256


def n_pairs(n: int) -> int:
    return n * (n - 1) // 2


def pair_index(i, j, n: int):
    """Condensed index of the unordered pair ``(i, j)``, ``i != j``."""
    i, j = np.minimum(i, j), np.maximum(i, j)
    return i * n - i * (i + 1) // 2 + (j - i - 1)


def condensed_to_pairs(k, n: int):
    """Inverse of :func:`pair_index`: row and column arrays for condensed indices ``k``."""
    k = np.asarray(k, dtype=np.int64)
    rows = np.arange(n, dtype=np.int64)
    starts = rows * n - rows * (rows + 1) // 2
    i = np.searchsorted(starts, k, side="right") - 1
    return i, k - starts[i] + i + 1


@dataclass(frozen=True)
class PairCorrelations:
    """Pairwise statistics for ``n`` units in condensed order.

    ``valid`` is False for pairs involving a unit with zero cross-outcome
    variance; those pairs hold NaN and are excluded downstream.
    """

    n: int
    lam: np.ndarray
    rho: np.ndarray
    rho_fisher: np.ndarray
    diag_lambda: np.ndarray
    scale: str = "fisher"
    n_slots: int = 0
    warnings: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.scale not in ("raw", "fisher"):
            raise ValueError("scale must be 'raw' or 'fisher'")

    @property
    def stat(self) -> np.ndarray:
        """The series that drives thresholding."""
        return self.rho_fisher if self.scale == "fisher" else self.rho

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.rho)

    def with_scale(self, scale: str) -> "PairCorrelations":
        return PairCorrelations(self.n, self.lam, self.rho, self.rho_fisher,
                                self.diag_lambda, scale, self.n_slots, self.warnings)

    def dense_rho(self) -> np.ndarray:
        out = np.eye(self.n)
        iu = np.triu_indices(self.n, 1)
        out[iu] = self.rho
        out[iu[1], iu[0]] = self.rho
        return out


def normalize_residuals(rp_or_eps, records=None) -> np.ndarray:
    """Scale each auxiliary outcome's residuals to unit mean square over units and periods.

    Accepts a :class:`ResidualPanel` or a raw ``(n, t, d)`` array.  Outcomes
    with zero residual variance are dropped with a warning.
    """
    eps = rp_or_eps.eps_aux if isinstance(rp_or_eps, ResidualPanel) else np.asarray(rp_or_eps, float)
    if eps.ndim == 2:
        eps = eps[:, None, :]
    n, t, d = eps.shape
    gamma = np.mean(eps.reshape(n * t, d) ** 2, axis=0)
    dead = ~(gamma > 0)
    if dead.any():
        warn(records, "correlation", "outcome_dropped_zero_variance",
             "auxiliary outcomes with zero residual variance dropped",
             outcomes=np.flatnonzero(dead).tolist())
        eps = eps[:, :, ~dead]
        gamma = gamma[~dead]
    return eps / np.sqrt(gamma)


def fisher_transform(rho, records=None):
    """``0.5 * log((1 + rho) / (1 - rho))``; values with ``|rho| >= 1`` are clamped first."""
    r = np.asarray(rho, dtype=float)
    over = np.abs(r) > FISHER_CLAMP
    if np.any(over):
        warn(records, "correlation", "fisher_clamped",
             "correlations at +/-1 clamped before the Fisher transform",
             count=int(np.sum(over)))
        r = np.clip(r, -FISHER_CLAMP, FISHER_CLAMP)
    out = np.arctanh(r)
    return float(out) if np.ndim(out) == 0 else out


def _slots(eps_norm, pooling):
    eps_norm = np.asarray(eps_norm, dtype=float)
    if eps_norm.ndim == 2:
        eps_norm = eps_norm[:, None, :]
    n, t, d = eps_norm.shape
    if pooling == "cross_section":
        if t != 1:
            raise DataError("cross_section pooling needs t == 1; use panel_pooled", "correlation")
    elif pooling != "panel_pooled":
        raise ValueError(f"unknown pooling {pooling!r}")
    z = eps_norm.reshape(n, t * d)
    if z.shape[1] < 2:
        raise DataError("need at least two outcome(-period) slots", "correlation")
    return z


def _row_block(z, r0, r1, n_slots, out):
    n = z.shape[0]
    g = (z[r0:r1] @ z[r0:].T) / n_slots
    for i in range(r0, r1):
        start = i * n - i * (i + 1) // 2
        out[start:start + n - i - 1] = g[i - r0, i - r0 + 1:]


def pairwise_correlations(
    eps_norm,
    pooling: str = "cross_section",
    scale: str = "fisher",
    workers: int = 1,
    records=None,
) -> PairCorrelations:
    """Covariance, correlation and Fisher-transformed correlation for all unit pairs.

    Each unit's normalized residuals are demeaned across its ``D`` outcome
    (or outcome-period) slots; the covariance of units ``i`` and ``j`` is
    the average product of the demeaned slots.  The kernel is evaluated as
    row blocks of a symmetric product; block boundaries do not depend on
    ``workers`` so the result is identical for any worker count.
    """
    z = _slots(eps_norm, pooling)
    n, n_slots = z.shape
    z = z - z.mean(axis=1, keepdims=True)
    diag = np.einsum("ij,ij->i", z, z) / n_slots
    lam = np.empty(n_pairs(n))
    blocks = [(r0, min(r0 + BLOCK_ROWS, n)) for r0 in range(0, n, BLOCK_ROWS)]
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(lambda b: _row_block(z, b[0], b[1], n_slots, lam), blocks))
    else:
        for r0, r1 in blocks:
            _row_block(z, r0, r1, n_slots, lam)

    i, j = np.triu_indices(n, 1)
    dead = ~(diag > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = lam / np.sqrt(diag[i] * diag[j])
    if dead.any():
        warn(records, "correlation", "unit_zero_variance",
             "units with zero cross-outcome variance; their pairs are excluded",
             units=np.flatnonzero(dead).tolist())
        bad = dead[i] | dead[j]
        rho[bad] = np.nan
        lam[bad] = np.nan
    np.clip(rho, -1.0, 1.0, out=rho)
    with np.errstate(invalid="ignore"):
        rho_f = fisher_transform(rho, records)
    rho_f = np.atleast_1d(rho_f)
    return PairCorrelations(n, lam, rho, rho_f, diag, scale, n_slots,
                            tuple(records) if records is not None else ())


def save_pairs(pc: PairCorrelations, path: str | Path) -> None:
    """Write the pair table.  ``.npz`` stores arrays; anything else is CSV.

    The CSV has header ``i,i',lambda,rho,rho_fisher``; diagonal rows
    ``i == i'`` carry ``lambda_ii`` with ``rho = 1``.
    """
    path = Path(path)
    if path.suffix == ".npz":
        np.savez(path, n=pc.n, lam=pc.lam, rho=pc.rho, rho_fisher=pc.rho_fisher,
                 diag_lambda=pc.diag_lambda, n_slots=pc.n_slots)
        return
    i, j = np.triu_indices(pc.n, 1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("i,i',lambda,rho,rho_fisher\n")
        for u in range(pc.n):
            fh.write(f"{u},{u},{float(pc.diag_lambda[u])!r},1.0,inf\n")
        for a, b, l, r, f in zip(i.tolist(), j.tolist(), pc.lam.tolist(),
                                 pc.rho.tolist(), pc.rho_fisher.tolist()):
            fh.write(f"{a},{b},{l!r},{r!r},{f!r}\n")


def load_pairs(path: str | Path, scale: str = "fisher") -> PairCorrelations:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as f:
            return PairCorrelations(int(f["n"]), f["lam"], f["rho"], f["rho_fisher"],
                                    f["diag_lambda"], scale, int(f["n_slots"]))
    try:
        raw = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=float)
    except ValueError as exc:
        raise DataError(f"malformed pair table {path}: {exc}", "correlation") from exc
    raw = np.atleast_2d(raw)
    if raw.shape[1] != 5:
        raise DataError(f"pair table {path} needs 5 columns", "correlation")
    if not np.all(np.isfinite(raw[:, :2])):
        raise DataError(f"pair table {path} has non-integer unit indices", "correlation")
    ii, jj = raw[:, 0].astype(np.int64), raw[:, 1].astype(np.int64)
    n = int(max(ii.max(), jj.max())) + 1
    diag = np.full(n, np.nan)
    on = ii == jj
    diag[ii[on]] = raw[on, 2]
    off = ~on
    if off.sum() != n_pairs(n):
        raise DataError(f"pair table {path} is incomplete", "correlation")
    k = pair_index(ii[off], jj[off], n)
    lam, rho, rf = (np.empty(n_pairs(n)) for _ in range(3))
    lam[k], rho[k], rf[k] = raw[off, 2], raw[off, 3], raw[off, 4]
    return PairCorrelations(n, lam, rho, rf, diag, scale)
