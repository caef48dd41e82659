"""
Accelerated inexact gradient (AIG) optimizer.

Three coupled sequences are kept: theta (aggressive steps), theta_ag
(conservative steps) and theta_md, the mixing point where the gradient is
evaluated. The optimizer minimizes; maximizing callers pass sense="maximize"
and the oracle is negated.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from pomp_core import RngStream, as_stream
from utils.table_io import write_table

logger = logging.getLogger(__name__)

POLICIES = ("nonconvex", "convex", "custom")
TRACE_SCHEMA = "aifkit.aig-trace/1"
_EPS = np.finfo(float).eps


class OracleError(RuntimeError):
    """The gradient oracle failed (or returned non-finite values) at iteration k."""

    def __init__(self, k: int, message: str = ""):
        self.k = k
        super().__init__(f"Gradient oracle failed at iteration k={k}" + (f": {message}" if message else ""))


class FlatGradientError(ValueError):
    """Every sampled gradient difference was zero, so no Lipschitz constant can be estimated."""


@dataclass(frozen=True)
class AigSchedule:
    alphas: np.ndarray
    betas: np.ndarray
    lambdas: np.ndarray
    gammas: np.ndarray
    policy: str
    L_est: float
    delta: float = 1.0

    def __post_init__(self):
        arrays = [np.asarray(a, dtype=float).reshape(-1) for a in (self.alphas, self.betas, self.lambdas, self.gammas)]
        N = len(arrays[0])
        if N < 1 or any(len(a) != N for a in arrays):
            raise ValueError("Schedule sequences must share one length N >= 1")
        if self.policy not in POLICIES:
            raise ValueError(f"Unknown schedule policy '{self.policy}'")
        alphas, betas, lambdas, _ = arrays
        if alphas[0] != 1.0:
            raise ValueError(f"alpha_1 must be 1, got {alphas[0]}")
        upper_ok = alphas[1:] <= 1 if self.policy == "custom" else alphas[1:] < 1
        if np.any(alphas[1:] <= 0) or not np.all(upper_ok):
            raise ValueError("alpha_k must lie in (0, 1) for k >= 2")
        if np.any(betas <= 0) or np.any(lambdas <= 0):
            raise ValueError("beta_k and lambda_k must be positive")
        for name, arr in zip(("alphas", "betas", "lambdas", "gammas"), arrays):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def N(self) -> int:
        return len(self.alphas)


def _alphas_gammas(N: int, delta: float) -> Tuple[np.ndarray, np.ndarray]:
    """alpha_k = 1 - ((k-1)/k)^{1+delta} and Gamma_k = 1/k^{1+delta}, evaluated without cancellation."""
    k = np.arange(1, N + 1, dtype=float)
    gammas = k ** -(1.0 + delta)
    alphas = np.ones(N)
    if N > 1:
        alphas[1:] = -np.expm1((1.0 + delta) * np.log1p(-1.0 / k[1:]))
    return alphas, gammas


def build_schedule_nonconvex(N: int, L_est: float, delta: float = 1.0) -> AigSchedule:
    """beta_k = lambda_k = 1/(2 L_est); alpha_k, Gamma_k from the 1/k^{1+delta} family."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if not L_est > 0:
        raise ValueError(f"L_est must be positive, got {L_est}")
    alphas, gammas = _alphas_gammas(N, delta)
    betas = np.full(N, 1.0 / (2.0 * L_est))
    schedule = AigSchedule(alphas, betas, betas.copy(), gammas, "nonconvex", float(L_est), float(delta))
    logger.debug(f"Built nonconvex AIG schedule: N={N}, L_est={L_est:.4g}, beta={betas[0]:.4g}")
    return schedule


def build_schedule_convex(N: int, L_est: float, delta: float = 1.0) -> AigSchedule:
    """
    lambda_k = c (k^{1+delta} - (k-1)^{1+delta}) with c the largest constant
    keeping alpha_k lambda_k <= beta_k = 1/(2 L_est) for every k <= N.
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if not L_est > 0:
        raise ValueError(f"L_est must be positive, got {L_est}")
    if not 0 < delta <= 1:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    alphas, gammas = _alphas_gammas(N, delta)
    # alpha_k / Gamma_k == k^{1+delta} - (k-1)^{1+delta}
    unscaled = alphas / gammas
    beta = 1.0 / (2.0 * L_est)
    c = beta / np.max(alphas * unscaled) * (1.0 - 4 * _EPS)
    if not (np.isfinite(c) and c > 0):
        raise ValueError(f"Infeasible convex schedule constant c={c}")
    schedule = AigSchedule(alphas, np.full(N, beta), c * unscaled, gammas, "convex", float(L_est), float(delta))
    logger.debug(f"Built convex AIG schedule: N={N}, L_est={L_est:.4g}, delta={delta}, c={c:.4g}")
    return schedule


def build_schedule_custom(alphas: Sequence[float], betas: Sequence[float], lambdas: Sequence[float],
                          L_est: float = float("nan")) -> AigSchedule:
    """Schedule from explicit sequences; Gamma follows the recursion Gamma_k = (1 - alpha_k) Gamma_{k-1}."""
    alphas = np.asarray(alphas, dtype=float)
    gammas = np.cumprod(np.concatenate([[1.0], 1.0 - alphas[1:]]))
    return AigSchedule(alphas, np.asarray(betas, dtype=float), np.asarray(lambdas, dtype=float),
                       gammas, "custom", L_est)


def build_schedule(policy: str, N: int, L_est: float, delta: float = 1.0) -> AigSchedule:
    if policy == "nonconvex":
        return build_schedule_nonconvex(N, L_est, delta)
    if policy == "convex":
        return build_schedule_convex(N, L_est, delta)
    raise ValueError(f"Policy '{policy}' cannot be built from (N, L_est); use build_schedule_custom")


def ck_coefficients(s: AigSchedule, L: float, form: str = "proof") -> np.ndarray:
    """
    C_k = 1 - L [lambda_k + (lambda_k - beta_k)^2 / (2 alpha_k Gamma_k lambda_k) * T_k]
    with T_k = sum_{tau=k}^N Gamma_tau ("proof") or sum_{tau=k}^N 1/Gamma_tau ("statement").
    """
    if form == "proof":
        terms = s.gammas
    elif form == "statement":
        terms = 1.0 / s.gammas
    else:
        raise ValueError(f"Unknown C_k form '{form}'")
    tail = np.cumsum(terms[::-1])[::-1]
    lam, beta = s.lambdas, s.betas
    with np.errstate(divide="ignore", invalid="ignore"):
        penalty = np.square(lam - beta) / (2.0 * s.alphas * s.gammas * lam) * tail
    penalty[lam == beta] = 0.0
    ck = 1.0 - L * (lam + penalty)
    bad = np.flatnonzero(~(ck > 0)) + 1
    if bad.size:
        logger.warning(f"{bad.size} non-positive C_k coefficients ({form} form), first at k={bad[0]}")
    return ck


def gamma_recursion_residuals(s: AigSchedule) -> np.ndarray:
    """Relative residuals of Gamma_k = (1 - alpha_k) Gamma_{k-1} for k >= 2."""
    predicted = (1.0 - s.alphas[1:]) * s.gammas[:-1]
    return np.abs(predicted - s.gammas[1:]) / np.abs(s.gammas[1:])


def weight_sum_residuals(s: AigSchedule) -> np.ndarray:
    """Relative residuals of sum_{tau<=k} alpha_tau/Gamma_tau = 1/Gamma_k."""
    partial = np.cumsum(s.alphas / s.gammas)
    target = 1.0 / s.gammas
    return np.abs(partial - target) / target


def gamma_weighted_sum(alphas: Sequence[float], etas: Sequence[float]) -> np.ndarray:
    """Gamma_k sum_{i<=k} eta_i / Gamma_i for Gamma built from alphas (alpha_1 = 1)."""
    alphas = np.asarray(alphas, dtype=float)
    gammas = np.cumprod(np.concatenate([[1.0], 1.0 - alphas[1:]]))
    return gammas * np.cumsum(np.asarray(etas, dtype=float) / gammas)


@dataclass(frozen=True)
class AigRecord:
    k: int
    theta: np.ndarray
    theta_ag: np.ndarray
    theta_md: np.ndarray
    grad_norm: float
    objective: Optional[float] = None


@dataclass(frozen=True)
class AigState:
    theta: np.ndarray
    theta_ag: np.ndarray
    theta_md: np.ndarray
    k: int = 0
    history: Tuple[AigRecord, ...] = field(default_factory=tuple)

    @classmethod
    def initial(cls, theta0: Sequence[float]) -> "AigState":
        theta0 = np.array(theta0, dtype=float)
        return cls(theta0, theta0.copy(), theta0.copy(), 0, ())


def aig_midpoint(state: AigState, s: AigSchedule) -> np.ndarray:
    """theta^md_k = (1 - alpha_k) theta^ag_{k-1} + alpha_k theta_{k-1} for k = state.k + 1."""
    k = state.k + 1
    if k > s.N:
        raise ValueError(f"Schedule exhausted: step {k} > N={s.N}")
    alpha = s.alphas[k - 1]
    return (1.0 - alpha) * state.theta_ag + alpha * state.theta


def aig_step(state: AigState, s: AigSchedule, g: Sequence[float],
             objective: Optional[float] = None) -> AigState:
    """
    One AIG step with gradient g taken at theta^md_k:
    theta_k = theta_{k-1} - lambda_k g and theta^ag_k = theta^md_k - beta_k g.
    """
    g = np.asarray(g, dtype=float)
    if g.shape != state.theta.shape:
        raise ValueError(f"Gradient has shape {g.shape}, expected {state.theta.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError(f"Non-finite gradient at step {state.k + 1}")
    md = aig_midpoint(state, s)
    k = state.k + 1
    theta = state.theta - s.lambdas[k - 1] * g
    theta_ag = md - s.betas[k - 1] * g
    record = AigRecord(k, theta, theta_ag, md, float(np.linalg.norm(g)), objective)
    return AigState(theta, theta_ag, md, k, state.history + (record,))


@dataclass
class AigResult:
    trace: List[AigRecord]
    final: AigState
    best_theta: np.ndarray
    best_k: int
    best_grad_norm: float

    def to_frame(self) -> pd.DataFrame:
        p = len(self.final.theta)
        rows = []
        for rec in self.trace:
            row = {"k": rec.k}
            row.update({f"theta_{i + 1}": rec.theta[i] for i in range(p)})
            row.update({f"theta_ag_{i + 1}": rec.theta_ag[i] for i in range(p)})
            row["grad_norm"] = rec.grad_norm
            row["objective"] = np.nan if rec.objective is None else rec.objective
            rows.append(row)
        return pd.DataFrame(rows)

    def to_csv(self, path: Union[str, Path]) -> Path:
        return write_table(self.to_frame(), path, TRACE_SCHEMA)


Oracle = Callable[[np.ndarray], Union[np.ndarray, Tuple[float, np.ndarray]]]


def aig_run(oracle: Oracle, theta0: Sequence[float], s: AigSchedule, sense: str = "minimize",
            tol: Optional[float] = None) -> AigResult:
    """
    Run N = s.N AIG steps, or stop early once the gradient norm drops below `tol`.
    The oracle returns a gradient, or (objective, gradient).
    The best iterate is the theta^md_k with the smallest observed gradient norm.
    """
    if sense not in ("minimize", "maximize"):
        raise ValueError(f"Unknown sense '{sense}'")
    sign = -1.0 if sense == "maximize" else 1.0
    state = AigState.initial(theta0)
    best_k, best_norm, best_theta = 0, np.inf, state.theta_md

    for _ in range(s.N):
        k = state.k + 1
        md = aig_midpoint(state, s)
        try:
            out = oracle(md)
        except Exception as exc:
            raise OracleError(k, str(exc)) from exc
        if isinstance(out, tuple):
            objective, g = float(out[0]), np.asarray(out[1], dtype=float)
        else:
            objective, g = None, np.asarray(out, dtype=float)
        if not np.all(np.isfinite(g)):
            raise OracleError(k, "non-finite gradient")
        state = aig_step(state, s, sign * g, objective)
        norm = state.history[-1].grad_norm
        if norm < best_norm:
            best_k, best_norm, best_theta = k, norm, md
        if tol is not None and norm < tol:
            logger.debug(f"AIG converged at k={k}: |g|={norm:.3e} < {tol:g}")
            break

    return AigResult(list(state.history), state, best_theta, best_k, best_norm)


def estimate_lipschitz(grad_fn: Callable[[np.ndarray, int], np.ndarray],
                       lower: Sequence[float], upper: Sequence[float],
                       seed: Union[int, RngStream], n_pairs: int = 20,
                       radius: Optional[float] = None) -> float:
    """
    Fallback Lipschitz estimate: twice the largest ||g(x) - g(y)|| / ||x - y||
    over random point pairs. x is uniform in [lower, upper]; y is uniform in the
    box too, or within `radius` of x when a radius is given. grad_fn receives the
    pair index as a key so stochastic oracles can share random numbers within a pair.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    rng = as_stream(seed).generator()
    best = 0.0
    for i in range(n_pairs):
        x = rng.uniform(lower, upper)
        if radius is None:
            y = rng.uniform(lower, upper)
        else:
            y = x + rng.uniform(-radius, radius, size=x.shape)
        dist = np.linalg.norm(x - y)
        if dist == 0:
            continue
        ratio = np.linalg.norm(np.asarray(grad_fn(x, i)) - np.asarray(grad_fn(y, i))) / dist
        if np.isfinite(ratio):
            best = max(best, float(ratio))
    if not best > 0:
        raise FlatGradientError("Could not estimate a positive Lipschitz constant")
    logger.info(f"Estimated Lipschitz constant L_est={2.0 * best:.4g} from {n_pairs} pairs")
    return 2.0 * best
