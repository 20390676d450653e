"""Least-squares fits that produce the residual panels used by the variance estimators.

Every fit regresses the outcome of interest and each auxiliary outcome on the
same right-hand side ``[1, W, X, fixed effects]``.  The coefficient on ``W``
is recovered by Frisch-Waugh-Lovell partialling: ``W`` and each outcome are
residualized on the covariate block with a pivoted QR factorization, then

    tau = <w_tilde, y> / s_n,   s_n = <w_tilde, W_residual>.

``w_tilde`` is the vector of *score weights* that the sandwich estimators
consume.  For OLS it is the residualized treatment; for weighted least
squares it is ``h * W_residual`` so that ``V = s_n^-2 w_tilde' Sigma w_tilde``
equals ``S(h)^-2 W'H Sigma H W``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg

from ._log import warn
from .dataset_io import RegressionDataset
from .errors import DataError, NumericalError

__all__ = ["ResidualPanel", "fit", "fit_ols", "fit_wls", "fit_iv_second_stage"]

RANK_TOL = 1e-10
WEAK_INSTRUMENT_F = 10.0
_MAP_TOL = 1e-14
_MAP_MAXITER = 10_000
_INDICATOR_LEVEL_LIMIT = 1000


@dataclass(frozen=True)
class ResidualPanel:
    eps0: np.ndarray
    eps_aux: np.ndarray
    w_tilde: np.ndarray
    tau_hat: float
    s_n: float
    tau_aux: np.ndarray
    n_params: int
    method: str = "ols"
    first_stage_f: float | None = None
    warnings: tuple = field(default=(), compare=False)

    @property
    def n(self) -> int:
        return self.eps0.shape[0]

    @property
    def t(self) -> int:
        return self.eps0.shape[1]

    @property
    def d(self) -> int:
        return self.eps_aux.shape[2]

    @property
    def n_obs(self) -> int:
        return self.eps0.size

    def unit_scores(self) -> np.ndarray:
        """Per-unit score ``g_i = sum_s w_tilde[i, s] * eps0[i, s]``."""
        return np.sum(self.w_tilde * self.eps0, axis=1)


class _Partialler:
    """Residualizes columns on a fixed covariate block (optionally weighted).

    Fixed effects are either expanded into indicator columns or swept out by
    alternating weighted demeaning; both give the same projection.
    """

    def __init__(self, ds: RegressionDataset, weights, fe_method: str):
        n_obs = ds.n * ds.t
        self.sqrt_h = None if weights is None else np.sqrt(weights.ravel())
        self.h = None if weights is None else weights.ravel()
        cols = [ds.x.reshape(n_obs, ds.k)] if ds.k else []
        names = list(ds.schema.covariates)
        self.fe_codes: list[np.ndarray] = []
        n_fe_params = 0
        if ds.fe is not None and ds.fe.shape[2]:
            codes = [pd.factorize(ds.fe[:, :, j].ravel())[0] for j in range(ds.fe.shape[2])]
            levels = sum(int(c.max()) + 1 for c in codes)
            if fe_method == "auto":
                fe_method = "indicators" if levels <= _INDICATOR_LEVEL_LIMIT else "within"
            if fe_method == "indicators":
                for j, c in enumerate(codes):
                    dummies = np.zeros((n_obs, int(c.max())), dtype=float)
                    rows = np.flatnonzero(c > 0)
                    dummies[rows, c[rows] - 1] = 1.0
                    cols.append(dummies)
                    fe_name = ds.schema.fixed_effects[j]
                    names += [f"{fe_name}[{lvl}]" for lvl in range(1, int(c.max()) + 1)]
            elif fe_method == "within":
                self.fe_codes = codes
                n_fe_params = levels - len(codes)
            else:
                raise ValueError(f"unknown fe_method {fe_method!r}")
        self.absorbed = bool(self.fe_codes)
        if not self.absorbed:
            cols.insert(0, np.ones((n_obs, 1)))
            names.insert(0, "intercept")
        self.names = names
        c = np.hstack(cols) if cols else np.zeros((n_obs, 0))
        self.c = self._demean(c) if self.absorbed else c
        # intercept is absorbed with the fixed effects
        self.n_params = self.c.shape[1] + n_fe_params + (1 if self.absorbed else 0)
        self.q = self._basis(self.c, self.names)

    def _scaled(self, a):
        return a if self.sqrt_h is None else a * self.sqrt_h[:, None]

    def _demean(self, a):
        if not self.fe_codes:
            return a
        a = np.array(a, dtype=float)
        h = np.ones(a.shape[0]) if self.h is None else self.h
        sums_h = [np.bincount(c, weights=h) for c in self.fe_codes]
        for _ in range(_MAP_MAXITER):
            delta = 0.0
            for c, sh in zip(self.fe_codes, sums_h):
                means = np.stack(
                    [np.bincount(c, weights=h * a[:, j]) for j in range(a.shape[1])], axis=1
                ) / sh[:, None]
                a -= means[c]
                delta = max(delta, float(np.max(np.abs(means))) if means.size else 0.0)
            if len(self.fe_codes) == 1 or delta <= _MAP_TOL * max(1.0, float(np.max(np.abs(a), initial=0.0))):
                return a
        raise NumericalError("fixed-effect demeaning did not converge", "regression")

    def _basis(self, c, names):
        if c.shape[1] == 0:
            return np.zeros((c.shape[0], 0))
        cs = self._scaled(c)
        check_rank(cs, names)
        q, _ = np.linalg.qr(cs)
        return q

    def residualize(self, v):
        """Residuals (on the raw scale) of each column of ``v`` on the covariate block."""
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if self.absorbed:
            v = self._demean(v)
        vs = self._scaled(v)
        r = vs - self.q @ (self.q.T @ vs)
        if self.sqrt_h is not None:
            r = r / self.sqrt_h[:, None]
        return r


def check_rank(a, names):
    """Raise :class:`NumericalError` naming dependent columns if ``a`` is rank deficient."""
    if a.shape[0] < a.shape[1]:
        raise DataError(f"{a.shape[0]} observations for {a.shape[1]} parameters", "regression")
    sv = np.linalg.svd(a, compute_uv=False)
    if sv.size == 0:
        return
    tol = RANK_TOL * sv[0]
    rank = int(np.sum(sv > tol))
    if rank < a.shape[1]:
        _, _, piv = scipy.linalg.qr(a, mode="economic", pivoting=True)
        bad = [names[i] for i in piv[rank:]]
        raise NumericalError(f"design matrix is rank deficient; dependent columns: {bad}",
                             "regression")


def _fit(ds, score_source, weights, fe_method, method, records, first_stage_f=None):
    n, t, d = ds.n, ds.t, ds.d
    n_obs = n * t
    part = _Partialler(ds, weights, fe_method)
    n_params = part.n_params + 1
    if n_obs <= n_params:
        raise DataError(f"need more than k+2={n_params} observations, got {n_obs}", "regression")

    w = ds.w.reshape(n_obs)
    src = score_source.reshape(n_obs)
    resid = part.residualize(np.column_stack([src, w, ds.y0.reshape(n_obs),
                                              ds.aux.reshape(n_obs, d)]))
    e_src, e_w, e_y = resid[:, 0], resid[:, 1], resid[:, 2:]
    src_block = part._demean(src[:, None]) if part.absorbed else src[:, None]
    check_rank(np.column_stack([part._scaled(part.c), part._scaled(src_block)]),
               part.names + [ds.schema.treatment])
    h = np.ones(n_obs) if weights is None else weights.reshape(n_obs)
    w_tilde = h * e_src
    s_n = float(w_tilde @ e_w)
    if not s_n > 0:
        raise NumericalError("treatment has no variation after partialling", "regression")
    taus = (w_tilde @ e_y) / s_n
    eps = e_y - np.outer(e_w, taus)
    return ResidualPanel(
        eps0=eps[:, 0].reshape(n, t),
        eps_aux=eps[:, 1:].reshape(n, t, d),
        w_tilde=w_tilde.reshape(n, t),
        tau_hat=float(taus[0]),
        s_n=s_n,
        tau_aux=taus[1:],
        n_params=n_params,
        method=method,
        first_stage_f=first_stage_f,
        warnings=tuple(records),
    )


def fit_ols(ds: RegressionDataset, fe_method: str = "auto") -> ResidualPanel:
    """OLS of ``y0`` and every auxiliary outcome on ``[1, W, X, FE]``.

    ``fe_method`` is ``"indicators"``, ``"within"`` or ``"auto"`` (indicators
    unless the fixed effects have more than 1000 levels in total).
    """
    return _fit(ds, ds.w, None, fe_method, "ols", list(ds.warnings))


def fit_wls(ds: RegressionDataset, fe_method: str = "auto") -> ResidualPanel:
    """Weighted least squares with the dataset's weights ``h``.

    Minimizes ``sum h (y - a - tau w - theta'x)^2``; the returned
    ``w_tilde`` is ``h``-scaled and ``s_n = W_res' H W_res``.
    """
    if ds.weights is None:
        raise DataError("fit_wls needs weights", "regression")
    if not np.all(ds.weights > 0):
        raise DataError("nonpositive weight", "regression")
    return _fit(ds, ds.w, ds.weights, fe_method, "wls", list(ds.warnings))


def fit_iv_second_stage(ds: RegressionDataset, instrument=None, fe_method: str = "auto") -> ResidualPanel:
    """Two-stage least squares; the variance machinery runs on the second stage.

    The treatment is replaced by its first-stage fitted values for the
    coefficient and score weights, while residuals use the original
    treatment.  The first-stage F statistic for the excluded instruments is
    stored on the result and a warning is recorded when it is below 10.
    """
    records = list(ds.warnings)
    z = ds.instrument if instrument is None else instrument
    if z is None:
        raise DataError("no instrument supplied", "regression")
    n_obs = ds.n * ds.t
    z = np.asarray(z, dtype=float).reshape(n_obs, -1)
    weights = ds.weights
    part = _Partialler(ds, weights, fe_method)
    w = ds.w.reshape(n_obs)
    names = part.names + [f"instrument{j}" for j in range(z.shape[1])]
    z_block = part._demean(z) if part.absorbed else z
    check_rank(np.column_stack([part._scaled(part.c), part._scaled(z_block)]), names)
    e_z = part.residualize(z)
    e_w = part.residualize(w)[:, 0]
    h = np.ones(n_obs) if weights is None else weights.reshape(n_obs)
    sh = np.sqrt(h)
    coef, *_ = np.linalg.lstsq(e_z * sh[:, None], e_w * sh, rcond=None)
    fitted_part = e_z @ coef
    w_hat = w - e_w + fitted_part
    rss_u = float(np.sum(h * (e_w - fitted_part) ** 2))
    ess = float(np.sum(h * fitted_part ** 2))
    q = z.shape[1]
    dof = n_obs - part.n_params - q
    f_stat = (ess / q) / (rss_u / dof) if rss_u > 0 and dof > 0 else float("inf")
    if f_stat < WEAK_INSTRUMENT_F:
        warn(records, "regression", "weak_instrument",
             "first-stage F statistic below 10", first_stage_f=f_stat)
    return _fit(ds, w_hat.reshape(ds.n, ds.t), weights, fe_method, "iv", records,
                first_stage_f=f_stat)


def fit(ds: RegressionDataset, fe_method: str = "auto", instrument=None) -> ResidualPanel:
    """Pick OLS, WLS or 2SLS from what the dataset carries."""
    if instrument is not None or ds.instrument is not None:
        return fit_iv_second_stage(ds, instrument, fe_method)
    if ds.weights is not None:
        return fit_wls(ds, fe_method)
    return fit_ols(ds, fe_method)
