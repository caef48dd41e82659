"""
Sequential Monte Carlo: weight normalization, systematic resampling, the
bootstrap particle filter, its perturbed-parameter extension and the score
estimator built from perturbed-parameter filter means.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd

from pomp_core import ParameterVector, PompModel, RngStream, TimeSeriesData, as_stream, check_dimensions
from utils.table_io import write_table

logger = logging.getLogger(__name__)

FILTER_SCHEMA = "aifkit.filter/1"
SCORE_MODES = ("sum", "averaged")


class FilterDegeneracyError(RuntimeError):
    """All particle weights were -inf at time n (and iteration m inside an estimation run)."""

    def __init__(self, n: Optional[int] = None, m: Optional[int] = None):
        self.n = n
        self.m = m
        where = f"n={n}" if m is None else f"m={m}, n={n}"
        super().__init__(f"Particle filter degenerate: all weights are -inf at {where}")


@dataclass(frozen=True)
class PerturbSpec:
    """Random-walk perturbation of parameter particles on the estimation scale."""
    sigmas: np.ndarray
    cooling_c: float
    init_multiplier_C: float = 1.0
    ivp_mask: np.ndarray = None

    def __post_init__(self):
        sigmas = np.asarray(self.sigmas, dtype=float).reshape(-1)
        mask = np.zeros(len(sigmas), dtype=bool) if self.ivp_mask is None \
            else np.asarray(self.ivp_mask, dtype=bool).reshape(-1)
        if len(mask) != len(sigmas):
            raise ValueError(f"{len(sigmas)} sigmas but {len(mask)} IVP flags")
        if np.any(sigmas < 0) or not np.all(np.isfinite(sigmas)):
            raise ValueError("Perturbation sigmas must be finite and non-negative")
        if not 0 < self.cooling_c < 1:
            raise ValueError(f"cooling_c must lie in (0, 1), got {self.cooling_c}")
        if not self.init_multiplier_C > 0:
            raise ValueError(f"init_multiplier_C must be positive, got {self.init_multiplier_C}")
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "ivp_mask", mask)

    @property
    def p(self) -> int:
        return len(self.sigmas)

    def cooling(self, m: int) -> float:
        if m < 1:
            raise ValueError(f"Iteration index must be >= 1, got {m}")
        return self.cooling_c ** (m - 1)

    def step_sd(self, m: int) -> np.ndarray:
        """Per-step sd c^{m-1} sigma_i; IVPs are never perturbed after time zero."""
        sd = self.cooling(m) * self.sigmas
        sd[self.ivp_mask] = 0.0
        return sd

    def init_sd(self, m: int) -> np.ndarray:
        return self.init_multiplier_C * self.cooling(m) * self.sigmas

    def scaled(self, factor: float) -> "PerturbSpec":
        return PerturbSpec(self.sigmas * factor, self.cooling_c, self.init_multiplier_C, self.ivp_mask)


@dataclass
class FilterOutput:
    loglik: float
    ess_trace: np.ndarray
    cond_logliks: np.ndarray
    param_filter_means: Optional[np.ndarray] = None
    degeneracy_flags: Tuple[int, ...] = ()
    final_swarm: Optional[np.ndarray] = None
    names: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def N(self) -> int:
        return len(self.ess_trace)

    def lag_mean(self, lag: Optional[int] = None) -> np.ndarray:
        """Parameter filter mean at 1-based time `lag` (default: final time)."""
        if self.param_filter_means is None:
            raise ValueError("Filter output has no parameter filter means (plain filtering)")
        lag = self.N if lag is None else lag
        if not 1 <= lag <= self.N:
            raise ValueError(f"IVP lag {lag} outside [1, {self.N}]")
        return self.param_filter_means[lag - 1]

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"n": np.arange(1, self.N + 1), "ess": self.ess_trace})
        if self.param_filter_means is not None:
            for i in range(self.param_filter_means.shape[1]):
                df[f"theta_bar_{i + 1}"] = self.param_filter_means[:, i]
        return df

    def to_csv(self, path: Union[str, Path]) -> Path:
        return write_table(self.to_frame(), path, FILTER_SCHEMA,
                           {"loglik": repr(float(self.loglik)), "names": list(self.names)})


def normalize_logweights(lw: np.ndarray, n: Optional[int] = None) -> Tuple[np.ndarray, float]:
    """
    Normalized weights and log((1/J) sum exp(lw)), computed with a max shift.
    """
    lw = np.asarray(lw, dtype=float)
    if np.any(np.isnan(lw)):
        raise ValueError(f"NaN log-weight at n={n}")
    mx = np.max(lw)
    if mx == -np.inf:
        raise FilterDegeneracyError(n)
    if mx == np.inf:
        raise ValueError(f"Infinite log-weight at n={n}")
    w = np.exp(lw - mx)
    total = np.sum(w)
    return w / total, float(mx + np.log(total / len(lw)))


def effective_sample_size(weights: np.ndarray) -> float:
    return float(1.0 / np.sum(np.square(weights)))


def systematic_resample(weights: np.ndarray, rng: Optional[np.random.Generator] = None,
                        u: Optional[float] = None) -> np.ndarray:
    """
    Systematic resampling: one uniform u, grid points (u + j)/J, and for each
    point the smallest index whose cumulative weight reaches it.
    """
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0):
        raise ValueError("Resampling weights must be non-negative")
    total = weights.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"Resampling weights must sum to 1 (got {total!r})")
    J = len(weights)
    if u is None:
        u = rng.random()
    points = (u + np.arange(J)) / J
    cum = np.cumsum(weights)
    if cum[-1] != 1.0:
        cum = cum / cum[-1]
    return np.minimum(np.searchsorted(cum, points, side="left"), J - 1)


def _filter_loop(m: PompModel, data: TimeSeriesData, swarm: np.ndarray, J: int,
                 rng: np.random.Generator, step_sd: Optional[np.ndarray],
                 center: Optional[np.ndarray], on_degeneracy: str) -> FilterOutput:
    """
    Shared filtering recursion. `swarm` holds estimation-scale parameters,
    either a (p,) vector shared by all particles or a (J, p) particle array.
    """
    perturbed = swarm.ndim == 2
    cols = np.flatnonzero(step_sd > 0) if perturbed and step_sd is not None else np.array([], dtype=int)
    if perturbed:
        theta = np.array(swarm, dtype=float)
        nat = m.transform.inverse(theta)
    else:
        nat = np.broadcast_to(m.transform.inverse(swarm), (J, m.p))

    x = np.asarray(m.init_sim(nat, rng), dtype=float)
    N = data.N
    ess = np.empty(N)
    cond = np.empty(N)
    means = np.empty((N, m.p)) if perturbed else None
    flags = []

    for n in range(1, N + 1):
        if cols.size:
            theta[:, cols] += rng.normal(size=(J, cols.size)) * step_sd[cols]
            nat = m.transform.inverse(theta)
        t_prev, t_n = data.interval(n)
        x = np.asarray(m.trans_sim(x, nat, t_prev, t_n, rng, data.covariates), dtype=float)
        lw = np.asarray(m.meas_logpdf(data.observations[n - 1], x, nat, t_n), dtype=float)
        try:
            w, log_mean = normalize_logweights(lw, n)
        except FilterDegeneracyError:
            if on_degeneracy == "raise":
                logger.error(f"Filter degeneracy in model '{m.name}' at n={n}")
                raise
            flags.append(n)
            w, log_mean = np.full(J, 1.0 / J), -np.inf
        ess[n - 1] = effective_sample_size(w)
        cond[n - 1] = log_mean
        idx = systematic_resample(w, rng)
        x = x[idx]
        if perturbed:
            theta = theta[idx]
            nat = nat[idx]
            means[n - 1] = center + np.mean(theta - center, axis=0)

    return FilterOutput(loglik=float(np.sum(cond)), ess_trace=ess, cond_logliks=cond,
                        param_filter_means=means, degeneracy_flags=tuple(flags),
                        final_swarm=theta if perturbed else None, names=m.param_names)


def bootstrap_filter(m: PompModel, theta: ParameterVector, data: TimeSeriesData, J: int,
                     seed: Union[int, RngStream], on_degeneracy: str = "raise") -> FilterOutput:
    """
    Bootstrap particle filter at the estimation-scale parameter vector `theta`,
    resampling at every step. loglik is the sum of log mean unnormalized weights.
    """
    if J < 2:
        raise ValueError(f"Need at least 2 particles, got J={J}")
    check_dimensions(m, theta, data)
    rng = as_stream(seed).generator()
    return _filter_loop(m, data, np.asarray(theta.values, dtype=float), J, rng, None, None, on_degeneracy)


def perturbed_filter(m: PompModel, theta_center: ParameterVector, data: TimeSeriesData, J: int,
                     spec: PerturbSpec, iteration_m: int, seed: Union[int, RngStream],
                     initial_swarm: Optional[np.ndarray] = None,
                     on_degeneracy: str = "raise") -> FilterOutput:
    """
    Filter with random-walk perturbed parameter particles.

    Particles start at N(theta_center, (C c^{m-1} sigma)^2) (or at `initial_swarm`
    plus that perturbation), non-IVP coordinates take N(0, (c^{m-1} sigma)^2)
    steps before every prediction, and parameters are resampled together with
    states. Coordinates with sigma_i = 0 are never touched.
    """
    if J < 2:
        raise ValueError(f"Need at least 2 particles, got J={J}")
    if iteration_m < 1:
        raise ValueError(f"iteration_m must be >= 1, got {iteration_m}")
    if spec.p != m.p:
        raise ValueError(f"PerturbSpec has {spec.p} sigmas, model '{m.name}' has {m.p} parameters")
    check_dimensions(m, theta_center, data)
    rng = as_stream(seed).generator()

    center = np.asarray(theta_center.values, dtype=float)
    if initial_swarm is None:
        swarm = np.tile(center, (J, 1))
    else:
        swarm = np.array(initial_swarm, dtype=float)
        if swarm.shape != (J, m.p):
            raise ValueError(f"initial_swarm has shape {swarm.shape}, expected {(J, m.p)}")
    init_sd = spec.init_sd(iteration_m)
    cols = np.flatnonzero(init_sd > 0)
    if cols.size:
        swarm[:, cols] += rng.normal(size=(J, cols.size)) * init_sd[cols]

    return _filter_loop(m, data, swarm, J, rng, spec.step_sd(iteration_m), center, on_degeneracy)


def estimate_score(f: FilterOutput, theta_ref: ParameterVector, spec: PerturbSpec,
                   iteration_m: int, mode: str = "sum") -> np.ndarray:
    """
    S_m = c^{-2(m-1)} Psi^{-1} sum_n (theta_bar_n - theta_ref), Psi = diag(sigma_i^2).
    IVP coordinates and coordinates with sigma_i = 0 get score 0. The averaged
    mode divides by N + 1.
    """
    if mode not in SCORE_MODES:
        raise ValueError(f"Unknown score mode '{mode}', expected one of {SCORE_MODES}")
    if f.param_filter_means is None:
        raise ValueError("Score estimation needs a perturbed filter output")
    ref = np.asarray(theta_ref.values, dtype=float)
    displacement = np.sum(f.param_filter_means - ref, axis=0)

    active = (spec.sigmas > 0) & ~spec.ivp_mask
    inv_psi = np.zeros(spec.p)
    inv_psi[active] = 1.0 / np.square(spec.sigmas[active])
    score = spec.cooling(iteration_m) ** -2 * inv_psi * displacement
    if mode == "averaged":
        score = score / (f.N + 1)
    return score
