"""Monte Carlo harness: calibrated block covariances, correlated draws and the SE horse-race.

Random numbers come from a Philox counter-based generator keyed by
``(seed, replicate, stream, block)``, so every replicate and every block has
its own independent stream and results do not depend on how replicates are
spread over threads.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import stats

from ._log import warn
from .correlation import PairCorrelations
from .dataset_io import dataset_from_arrays
from .errors import DataError, NumericalError
from .pipeline import TMOConfig, run_tmo

__all__ = [
    "CalibratedSigma",
    "ProportionalDGP",
    "SimResult",
    "calibrate_sigma",
    "block_sigma",
    "draw_errors",
    "synthetic_treatment",
    "true_variance",
    "run_horserace",
    "generate_proportional",
    "omega_matrix",
    "v_star",
    "rng_for",
    "CRITICAL_VALUE",
    "BLOCK_FORMAT",
]

CRITICAL_VALUE = 1.959964
BLOCK_FORMAT = "tmo-block-sigma/1"
JITTERS = (0.0, 1e-12, 1e-10, 1e-8)
PSD_TOL = 1e-8

STREAM_ERRORS, STREAM_AUX, STREAM_TREATMENT, STREAM_PROPORTIONAL = range(4)


def rng_for(seed: int, replicate: int = 0, stream: int = 0, block: int = 0) -> np.random.Generator:
    """Independent generator for one ``(seed, replicate, stream, block)`` key."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, replicate, stream, block])))


def _cholesky_jitter(a, what="matrix"):
    scale = max(1.0, float(np.max(np.abs(np.diag(a))))) if a.size else 1.0
    for eps in JITTERS:
        try:
            return np.linalg.cholesky(a + eps * scale * np.eye(a.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(f"Cholesky factorization of {what} failed after 1e-8 jitter", "simulation")


def _repair_correlation(block, records=None):
    """Clip negative eigenvalues and rescale back to unit diagonal."""
    vals, vecs = np.linalg.eigh(block)
    if vals[0] >= -PSD_TOL:
        return block
    warn(records, "simulation", "psd_repair", "block covariance repaired by eigenvalue clipping",
         min_eigenvalue=float(vals[0]), size=int(block.shape[0]))
    fixed = (vecs * np.maximum(vals, 0.0)) @ vecs.T
    s = 1.0 / np.sqrt(np.diag(fixed))
    fixed = fixed * s[:, None] * s[None, :]
    return 0.5 * (fixed + fixed.T)


@dataclass(frozen=True)
class CalibratedSigma:
    """Block-diagonal unit covariance.

    ``blocks`` holds ``(members, values)`` pairs; units in no block have
    variance 1 and no correlation with anyone.
    """

    n: int
    blocks: tuple
    cutoff: float = float("nan")
    retained_pair_fraction: float = float("nan")

    def __post_init__(self):
        seen = np.zeros(self.n, bool)
        for members, values in self.blocks:
            if values.shape != (members.size, members.size):
                raise DataError("block values do not match block members", "simulation")
            if seen[members].any():
                raise DataError("unit assigned to more than one block", "simulation")
            seen[members] = True

    @property
    def cluster_assignment(self) -> np.ndarray:
        """Block id per unit, ``-1`` for units outside every block."""
        out = np.full(self.n, -1, dtype=np.int64)
        for b, (members, _) in enumerate(self.blocks):
            out[members] = b
        return out

    def cluster_labels(self) -> np.ndarray:
        """Block ids with a fresh singleton label for each unassigned unit."""
        lab = self.cluster_assignment.copy()
        free = lab < 0
        lab[free] = len(self.blocks) + np.arange(int(free.sum()))
        return lab

    def dense(self) -> np.ndarray:
        out = np.eye(self.n)
        for members, values in self.blocks:
            out[np.ix_(members, members)] = values
        return out

    def min_eigenvalue(self) -> float:
        vals = [float(np.linalg.eigvalsh(v)[0]) for _, v in self.blocks]
        if len(self.blocks) == 0 or sum(m.size for m, _ in self.blocks) < self.n:
            vals.append(1.0)
        return min(vals)

    @cached_property
    def factors(self) -> tuple:
        return tuple(_cholesky_jitter(v, f"block {b}") for b, (_, v) in enumerate(self.blocks))

    def quad_form(self, v) -> float:
        """``v' Sigma v`` without forming the dense matrix."""
        v = np.asarray(v, dtype=float)
        total = float(np.sum(v * v))
        for members, values in self.blocks:
            vb = v[members]
            total += float(vb @ values @ vb - vb @ vb)
        return total

    def to_json(self) -> str:
        doc = {
            "format": BLOCK_FORMAT,
            "n": self.n,
            "cutoff": self.cutoff,
            "retained_pair_fraction": self.retained_pair_fraction,
            "blocks": [{"id": b, "members": m.tolist(), "values": v.tolist()}
                       for b, (m, v) in enumerate(self.blocks)],
        }
        return json.dumps(doc, indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "CalibratedSigma":
        doc = json.loads(text)
        if doc.get("format") != BLOCK_FORMAT:
            raise DataError(f"not a block covariance file (format {doc.get('format')!r})", "simulation")
        blocks = tuple((np.asarray(b["members"], dtype=np.int64), np.asarray(b["values"], dtype=float))
                       for b in sorted(doc["blocks"], key=lambda b: b["id"]))
        return cls(int(doc["n"]), blocks, float(doc["cutoff"]), float(doc["retained_pair_fraction"]))

    @classmethod
    def load(cls, path) -> "CalibratedSigma":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def calibrate_sigma(pc: PairCorrelations, cutoff: float = 0.45, records=None) -> CalibratedSigma:
    """Greedy block covariance from a pair-correlation table.

    Repeatedly take the unassigned unit with the most ``|rho| >= cutoff``
    links to other unassigned units (lowest index on ties); it and those
    neighbours form a block.  Within a block every entry is the estimated
    correlation, including below-cutoff pairs; across blocks it is zero.
    """
    if not 0 < cutoff < 1:
        raise ValueError("cutoff must lie in (0, 1)")
    n = pc.n
    rho = pc.dense_rho()
    with np.errstate(invalid="ignore"):
        adj = np.abs(rho) >= cutoff
    np.fill_diagonal(adj, False)
    total_links = int(adj.sum()) // 2
    free = np.ones(n, bool)
    degree = adj.sum(axis=1).astype(np.int64)
    blocks = []
    within = 0
    while True:
        cand = np.where(free, degree, -1)
        center = int(np.argmax(cand))
        if cand[center] <= 0:
            break
        members = np.flatnonzero(adj[center] & free)
        members = np.sort(np.append(members, center))
        free[members] = False
        degree -= adj[:, members].sum(axis=1)
        values = rho[np.ix_(members, members)].copy()
        values = np.where(np.isnan(values), 0.0, values)
        np.fill_diagonal(values, 1.0)
        within += int(adj[np.ix_(members, members)].sum()) // 2
        blocks.append((members, _repair_correlation(values, records)))
    frac = within / total_links if total_links else 0.0
    return CalibratedSigma(n, tuple(blocks), float(cutoff), float(frac))


def block_sigma(n: int, n_blocks: int, block_size: int, rho: float) -> CalibratedSigma:
    """Equicorrelated blocks on units ``0 .. n_blocks*block_size - 1``; the rest are singletons."""
    if n_blocks * block_size > n:
        raise ValueError("blocks do not fit in n units")
    values = np.full((block_size, block_size), float(rho))
    np.fill_diagonal(values, 1.0)
    blocks = tuple((np.arange(b * block_size, (b + 1) * block_size), values.copy())
                   for b in range(n_blocks))
    return CalibratedSigma(n, blocks, float("nan"), float("nan"))


def draw_errors(sigma: CalibratedSigma, seed: int, replicate: int = 0, n_draws: int | None = None,
                stream: int = STREAM_ERRORS) -> np.ndarray:
    """Draws from ``N(0, Sigma)``: shape ``(n,)``, or ``(n, n_draws)`` if ``n_draws`` is given.

    Each block uses its own Cholesky factor and generator; the singleton
    units share the generator keyed by block id ``len(blocks)``.
    """
    k = 1 if n_draws is None else int(n_draws)
    out = np.empty((sigma.n, k))
    assigned = np.zeros(sigma.n, bool)
    for b, ((members, _), chol) in enumerate(zip(sigma.blocks, sigma.factors)):
        z = rng_for(seed, replicate, stream, b).standard_normal((members.size, k))
        out[members] = chol @ z
        assigned[members] = True
    rest = np.flatnonzero(~assigned)
    if rest.size:
        out[rest] = rng_for(seed, replicate, stream, len(sigma.blocks)).standard_normal((rest.size, k))
    return out[:, 0] if n_draws is None else out


def synthetic_treatment(sigma: CalibratedSigma, seed: int, block_sd: float = 1.0,
                        noise_sd: float = 0.5) -> np.ndarray:
    """Treatment that is correlated within blocks.

    Block members get a shared block effect plus idiosyncratic noise;
    singletons get noise with the same total variance.
    """
    rng = rng_for(seed, 0, STREAM_TREATMENT, 0)
    w = rng.standard_normal(sigma.n) * math.sqrt(block_sd ** 2 + noise_sd ** 2)
    effects = rng.standard_normal(len(sigma.blocks)) * block_sd
    for b, (members, _) in enumerate(sigma.blocks):
        w[members] = effects[b] + noise_sd * rng.standard_normal(members.size)
    return w


def true_variance(sigma: CalibratedSigma, w) -> float:
    """``S^-2 w_res' Sigma w_res`` for a regression on ``[1, w]``."""
    wr = np.asarray(w, dtype=float) - np.mean(w)
    s = float(wr @ wr)
    return sigma.quad_form(wr) / s ** 2


@dataclass
class SimResult:
    methods: dict
    replications: int
    seed: int
    alpha: float = 0.05
    critical_value: float = CRITICAL_VALUE
    se_true: float = float("nan")
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"methods": self.methods, "replications": self.replications, "seed": self.seed,
                "alpha": self.alpha, "critical_value": self.critical_value,
                "se_true": self.se_true, "notes": self.notes}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        lines = ["method,mean_se_ratio,rejection_rate,n_invalid"]
        for name, row in self.methods.items():
            lines.append(f"{name},{row['mean_se_ratio']!r},{row['rejection_rate']!r},{row['n_invalid']}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        lines = [f"{'method':<10}{'Mean(Est. SE / True SE)':>26}{'Rej. rate':>12}"]
        for name, row in self.methods.items():
            lines.append(f"{name:<10}{row['mean_se_ratio']:>26.3f}{row['rejection_rate']:>12.3f}")
        lines.append(f"replications {self.replications}, seed {self.seed}, "
                     f"critical value {self.critical_value} (normal)")
        lines.extend(self.notes)
        return "\n".join(lines) + "\n"


BASELINES = ("hc0", "hc1", "cluster", "conley")


def _replicate(rep, sigma, w, methods, seed, d_aux, cfg, clusters, coords):
    eps = draw_errors(sigma, seed, rep, stream=STREAM_ERRORS)
    aux = draw_errors(sigma, seed, rep, n_draws=d_aux, stream=STREAM_AUX)
    ds = dataset_from_arrays(eps, aux, w, clusters=clusters, coords=coords)
    res = run_tmo(ds, cfg, records=[])
    rep_out = {}
    for m in methods:
        v = res.report.v_tmo if m == "tmo" else res.report.v_baselines[m]
        rep_out[m] = (res.report.tau_hat, v)
    return rep_out


def run_horserace(
    sigma: CalibratedSigma,
    w,
    methods=("hc1", "tmo"),
    reps: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
    d_aux: int = 60,
    clusters=None,
    coords=None,
    bandwidth_miles: float | None = None,
    tmo_config: TMOConfig | None = None,
    workers: int = 1,
) -> SimResult:
    """Regress pure-noise outcomes on ``w`` and score each method's standard error.

    Each replicate draws ``y = eps ~ N(0, Sigma)`` and ``d_aux`` auxiliary
    outcomes from the same ``Sigma``; the thresholded estimator sees the
    auxiliary outcomes, the baselines only the main regression.  Replicates
    with a negative variance are counted in ``n_invalid`` and left out of
    both averages.
    """
    if reps < 100:
        raise ValueError("reps must be at least 100")
    methods = tuple(methods)
    unknown = set(methods) - set(BASELINES) - {"tmo"}
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    if "cluster" in methods and clusters is None:
        raise DataError("cluster method needs cluster labels", "simulation")
    if "conley" in methods and (coords is None or bandwidth_miles is None):
        raise DataError("conley method needs coordinates and a bandwidth", "simulation")
    w = np.asarray(w, dtype=float)
    if w.shape != (sigma.n,):
        raise DataError("treatment length does not match Sigma", "simulation")
    base = tmo_config or TMOConfig()
    cfg = TMOConfig(**{**base.__dict__,
                       "baselines": tuple(m for m in methods if m != "tmo"),
                       "reference": methods[0],
                       "bandwidth_miles": bandwidth_miles if bandwidth_miles is not None else base.bandwidth_miles,
                       "workers": 1})
    se_true = math.sqrt(true_variance(sigma, w))
    crit = CRITICAL_VALUE if alpha == 0.05 else float(stats.norm.ppf(1 - alpha / 2))

    def one(rep):
        return _replicate(rep, sigma, w, methods, seed, d_aux, cfg, clusters, coords)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(one, range(reps)))
    else:
        outs = [one(r) for r in range(reps)]

    table = {}
    for m in methods:
        tau = np.array([o[m][0] for o in outs])
        v = np.array([o[m][1] for o in outs])
        ok = v > 0
        se = np.sqrt(v[ok])
        table[m] = {
            "mean_se_ratio": float(np.mean(se / se_true)) if ok.any() else float("nan"),
            "rejection_rate": float(np.mean(np.abs(tau[ok]) / se > crit)) if ok.any() else float("nan"),
            "n_invalid": int((~ok).sum()),
        }
    notes = ["normal critical value used for rejection"]
    if "tmo" in methods:
        notes.append("auxiliary outcomes drawn from the same Sigma as the errors (favourable setting)")
    return SimResult(table, reps, seed, alpha, crit, se_true, notes)


@dataclass(frozen=True)
class ProportionalDGP:
    """``Y = 1 tau' + A Z B`` with ``A A' = lambda_n`` and ``B' B = gamma_d``."""

    lambda_n: np.ndarray
    gamma_d: np.ndarray
    tau: np.ndarray | None = None
    noise: str = "gaussian"

    def __post_init__(self):
        for name in ("lambda_n", "gamma_d"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.ndim != 2 or a.shape[0] != a.shape[1] or not np.allclose(a, a.T):
                raise DataError(f"{name} must be a symmetric square matrix", "simulation")
        if self.noise != "gaussian":
            raise ValueError("only gaussian noise is supported")

    @property
    def n(self) -> int:
        return np.asarray(self.lambda_n).shape[0]

    @property
    def d(self) -> int:
        return np.asarray(self.gamma_d).shape[0]


def generate_proportional(dgp: ProportionalDGP, seed: int, replicate: int = 0) -> np.ndarray:
    """One ``n x d`` outcome matrix with covariance ``lambda_n (x) gamma_d``."""
    a = _cholesky_jitter(np.asarray(dgp.lambda_n, float), "lambda_n")
    b = _cholesky_jitter(np.asarray(dgp.gamma_d, float), "gamma_d").T
    z = rng_for(seed, replicate, STREAM_PROPORTIONAL, 0).standard_normal((dgp.n, dgp.d))
    y = a @ z @ b
    if dgp.tau is not None:
        y = y + np.asarray(dgp.tau, float)[None, :]
    return y


def omega_matrix(gamma) -> np.ndarray:
    """``Gamma^1/2 diag(1/gamma_jj) Gamma^1/2``, the across-outcome correlation structure."""
    gamma = np.asarray(gamma, dtype=float)
    vals, vecs = np.linalg.eigh(gamma)
    root = (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T
    return root @ np.diag(1.0 / np.diag(gamma)) @ root


def v_star(gamma, lam: float = 1.0) -> float:
    """Null variance ``lam^2 / d^2 * sum omega_jj'^2``; its reciprocal is the effective df."""
    om = omega_matrix(gamma)
    d = om.shape[0]
    return float(lam ** 2 * np.sum(om * om) / d ** 2)


def sigma_from_config(spec: dict, base_dir: Path = Path(".")) -> CalibratedSigma:
    """Sigma source: ``identity``, ``synthetic`` block spec, or a ``blocks`` file."""
    source = spec.get("source", "identity")
    if source == "identity":
        return CalibratedSigma(int(spec["n"]), ())
    if source == "synthetic":
        return block_sigma(int(spec["n"]), int(spec["n_blocks"]), int(spec["block_size"]), float(spec["rho"]))
    if source == "blocks":
        return CalibratedSigma.load(base_dir / spec["path"])
    raise DataError(f"unknown sigma source {source!r}", "simulation")


def treatment_from_config(spec: dict, sigma: CalibratedSigma, seed: int, base_dir: Path = Path(".")):
    source = spec.get("source", "synthetic")
    if source == "synthetic":
        return synthetic_treatment(sigma, seed, float(spec.get("block_sd", 1.0)),
                                   float(spec.get("noise_sd", 0.5)))
    if source == "column":
        import pandas as pd

        frame = pd.read_csv(base_dir / spec["path"], float_precision="round_trip")
        if spec["column"] not in frame:
            raise DataError(f"treatment column {spec['column']!r} not found", "simulation")
        return frame[spec["column"]].to_numpy(dtype=float)
    raise DataError(f"unknown treatment source {source!r}", "simulation")


def run_from_config(config: dict, base_dir: Path = Path("."), seed: int | None = None,
                    workers: int = 1) -> SimResult:
    """Horse-race driven by a parsed simulation config (see the README for the keys)."""
    seed = int(config.get("seed", 0) if seed is None else seed)
    sigma_spec = dict(config.get("sigma", {"source": "identity"}))
    sigma_spec.setdefault("n", config.get("n"))
    sigma = sigma_from_config(sigma_spec, base_dir)
    w = treatment_from_config(config.get("treatment", {}), sigma, seed, base_dir)
    methods = tuple(config.get("methods", ("hc1", "tmo")))
    clusters = sigma.cluster_labels() if "cluster" in methods else None
    return run_horserace(sigma, w, methods, int(config.get("reps", 1000)),
                         float(config.get("alpha", 0.05)), seed, int(config.get("d", 60)),
                         clusters=clusters, workers=workers)
