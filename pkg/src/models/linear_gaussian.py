"""
Bivariate linear-Gaussian autoregression with an exact Kalman filter.

    X_n | X_{n-1} = x ~ N(alpha x, sigma^T sigma)
    Y_n | X_n = x     ~ N(x, obs_cov)

X_0 = x0 is a point mass. The Kalman filter gives the exact log likelihood,
used as the reference for the particle methods.
"""
import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from aig import aig_run, build_schedule_convex, estimate_lipschitz
from pomp_core import ParamTransform, PompModel, RngStream, TimeSeriesData, as_stream

logger = logging.getLogger(__name__)

ALPHA_NAMES = ("alpha_1", "alpha_2", "alpha_3", "alpha_4")
IVP_NAMES = ("x0_1", "x0_2")
PARAM_NAMES = ALPHA_NAMES + IVP_NAMES
TOY_FREE = ("alpha_2", "alpha_3")
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class LinearGaussianSpec:
    """alpha is read row-major as (alpha_1, alpha_2; alpha_3, alpha_4)."""
    alpha: np.ndarray
    sigma: np.ndarray
    obs_cov: np.ndarray = field(default_factory=lambda: np.eye(2))
    x0: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float)
        sigma = np.array(self.sigma, dtype=float)
        obs_cov = np.array(self.obs_cov, dtype=float)
        x0 = np.array(self.x0, dtype=float).reshape(-1)
        d = len(x0)
        for name, mat in (("alpha", alpha), ("sigma", sigma), ("obs_cov", obs_cov)):
            if mat.shape != (d, d):
                raise ValueError(f"{name} has shape {mat.shape}, expected {(d, d)}")
            if not np.all(np.isfinite(mat)):
                raise ValueError(f"{name} has non-finite entries")
        if not np.allclose(obs_cov, obs_cov.T):
            raise ValueError("obs_cov must be symmetric")
        if not np.min(np.linalg.eigvalsh(obs_cov)) > 0:
            raise ValueError("obs_cov must be positive definite")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "obs_cov", obs_cov)
        object.__setattr__(self, "x0", x0)

    @classmethod
    def toy(cls) -> "LinearGaussianSpec":
        return cls(alpha=np.array([[0.8, -0.5], [0.3, 0.9]]),
                   sigma=np.array([[3.0, 0.0], [-0.5, 2.0]]),
                   obs_cov=np.eye(2),
                   x0=np.array([-3.0, 4.0]))

    @property
    def d(self) -> int:
        return len(self.x0)

    @property
    def process_cov(self) -> np.ndarray:
        return self.sigma.T @ self.sigma

    def get(self, name: str) -> float:
        if name in ALPHA_NAMES:
            return float(self.alpha.reshape(-1)[ALPHA_NAMES.index(name)])
        if name in IVP_NAMES:
            return float(self.x0[IVP_NAMES.index(name)])
        raise KeyError(f"Unknown linear-Gaussian parameter '{name}'")

    def with_params(self, values: Mapping[str, float]) -> "LinearGaussianSpec":
        alpha = self.alpha.copy().reshape(-1)
        x0 = self.x0.copy()
        for name, value in values.items():
            if name in ALPHA_NAMES:
                alpha[ALPHA_NAMES.index(name)] = value
            elif name in IVP_NAMES:
                x0[IVP_NAMES.index(name)] = value
            else:
                raise KeyError(f"Unknown linear-Gaussian parameter '{name}'")
        return replace(self, alpha=alpha.reshape(self.d, self.d), x0=x0)


@dataclass
class KalmanResult:
    loglik: float
    cond_logliks: np.ndarray
    pred_means: np.ndarray
    pred_covs: np.ndarray
    filt_means: np.ndarray
    filt_covs: np.ndarray


def kalman_loglik(spec: LinearGaussianSpec, data: TimeSeriesData) -> KalmanResult:
    """Exact filtering recursion from the point mass at x0."""
    if data.d_y != spec.d:
        raise ValueError(f"Data has d_y={data.d_y}, model state has dimension {spec.d}")
    d, N = spec.d, data.N
    Q, R, A = spec.process_cov, spec.obs_cov, spec.alpha
    eye = np.eye(d)
    mean, cov = spec.x0.copy(), np.zeros((d, d))
    out = KalmanResult(0.0, np.empty(N), np.empty((N, d)), np.empty((N, d, d)),
                       np.empty((N, d)), np.empty((N, d, d)))

    for n in range(N):
        mean = A @ mean
        cov = A @ cov @ A.T + Q
        cov = 0.5 * (cov + cov.T)
        out.pred_means[n], out.pred_covs[n] = mean, cov
        S = cov + R
        try:
            factor = cho_factor(S, lower=True)
        except LinAlgError as exc:
            raise ValueError(f"Singular innovation covariance at n={n + 1}") from exc
        innov = data.observations[n] - mean
        logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
        out.cond_logliks[n] = -0.5 * (d * LOG_2PI + logdet + innov @ cho_solve(factor, innov))
        gain = cho_solve(factor, cov).T
        mean = mean + gain @ innov
        # Joseph form keeps the covariance symmetric positive semidefinite
        IK = eye - gain
        cov = IK @ cov @ IK.T + gain @ R @ gain.T
        cov = 0.5 * (cov + cov.T)
        out.filt_means[n], out.filt_covs[n] = mean, cov

    out.loglik = float(np.sum(out.cond_logliks))
    return out


def kalman_fd_gradient(spec: LinearGaussianSpec, data: TimeSeriesData, coords: Sequence[str] = TOY_FREE,
                       h_fd: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of the Kalman loglik in the named coordinates."""
    if not h_fd > 0:
        raise ValueError(f"h_fd must be positive, got {h_fd}")
    grad = np.empty(len(coords))
    for i, name in enumerate(coords):
        value = spec.get(name)
        up = kalman_loglik(spec.with_params({name: value + h_fd}), data).loglik
        down = kalman_loglik(spec.with_params({name: value - h_fd}), data).loglik
        grad[i] = (up - down) / (2.0 * h_fd)
    return grad


def lg_simulate(spec: LinearGaussianSpec, N: int, seed: Union[int, RngStream],
                return_states: bool = False) -> Union[TimeSeriesData, Tuple[TimeSeriesData, np.ndarray]]:
    """Exact simulation at times 1..N from x0 at t0 = 0."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    rng = as_stream(seed).generator()
    d = spec.d
    # factor F with F F^T = obs_cov
    vals, vecs = np.linalg.eigh(spec.obs_cov)
    obs_factor = vecs * np.sqrt(np.clip(vals, 0.0, None))
    states = np.empty((N + 1, d))
    states[0] = spec.x0
    y = np.empty((N, d))
    for n in range(1, N + 1):
        states[n] = spec.alpha @ states[n - 1] + rng.standard_normal(d) @ spec.sigma
        y[n - 1] = states[n] + obs_factor @ rng.standard_normal(d)
    data = TimeSeriesData(np.arange(1, N + 1, dtype=float), y, None, 0.0)
    return (data, states) if return_states else data


def linear_gaussian_model(spec: LinearGaussianSpec, free: Sequence[str] = TOY_FREE,
                          name: str = "linear_gaussian") -> PompModel:
    """
    PompModel for the free coordinates; every other coordinate is held at its
    value in `spec`. x0_1/x0_2 are initial-value parameters.
    """
    free = tuple(free)
    unknown = [n for n in free if n not in PARAM_NAMES]
    if unknown:
        raise ValueError(f"Unknown linear-Gaussian parameters: {unknown}")
    if spec.d != 2:
        raise ValueError("linear_gaussian_model supports the bivariate model only")
    alpha_cols = [(ALPHA_NAMES.index(n), i) for i, n in enumerate(free) if n in ALPHA_NAMES]
    x0_cols = [(IVP_NAMES.index(n), i) for i, n in enumerate(free) if n in IVP_NAMES]
    base_alpha = spec.alpha.reshape(-1)
    sigma = spec.sigma
    obs_factor, _ = cho_factor(spec.obs_cov, lower=True)
    obs_factor = np.tril(obs_factor)
    obs_logdet = 2.0 * np.sum(np.log(np.diag(obs_factor)))

    def init_sim(theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = np.tile(spec.x0, (theta.shape[0], 1))
        for k, i in x0_cols:
            x[:, k] = theta[:, i]
        return x

    def trans_sim(x: np.ndarray, theta: np.ndarray, t0: float, t1: float,
                  rng: np.random.Generator, covariates=None) -> np.ndarray:
        noise = rng.standard_normal(x.shape) @ sigma
        if not alpha_cols:
            return x @ spec.alpha.T + noise
        A = np.tile(base_alpha, (x.shape[0], 1))
        for k, i in alpha_cols:
            A[:, k] = theta[:, i]
        A = A.reshape(-1, 2, 2)
        return np.einsum("jab,jb->ja", A, x) + noise

    def meas_logpdf(y: np.ndarray, x: np.ndarray, theta: np.ndarray, t: float) -> np.ndarray:
        z = np.linalg.solve(obs_factor, (y - x).T)
        return -0.5 * (2 * LOG_2PI + obs_logdet + np.sum(z * z, axis=0))

    model = PompModel(name=name, param_names=free, d_x=2, d_y=2, init_sim=init_sim, trans_sim=trans_sim,
                      meas_logpdf=meas_logpdf, transform=ParamTransform.identity(free),
                      ivp_names=tuple(n for n in free if n in IVP_NAMES))
    return replace(model, defaults=model.params({n: spec.get(n) for n in free}))


@dataclass
class KalmanMle:
    coords: Tuple[str, ...]
    theta: np.ndarray
    loglik: float
    grad_norm: float
    spec: LinearGaussianSpec
    start_results: List[Tuple[np.ndarray, float]] = field(default_factory=list)

    def as_dict(self) -> Dict[str, float]:
        return {n: float(v) for n, v in zip(self.coords, self.theta)}


def kalman_mle(spec: LinearGaussianSpec, data: TimeSeriesData, coords: Sequence[str] = TOY_FREE,
               lower: Optional[Sequence[float]] = None, upper: Optional[Sequence[float]] = None,
               starts: Optional[Sequence[Sequence[float]]] = None, n_iter: int = 50, max_rounds: int = 20,
               L_est: Optional[float] = None, seed: int = 0, h_fd: float = 1e-5,
               tol: float = 1e-6) -> KalmanMle:
    """
    Exact-gradient maximum likelihood: convex-schedule AIG on the Kalman
    finite-difference gradient from a 3^p grid of starts inside the box
    (default [-1, 1] per coordinate) unless explicit starts are given.
    Each start runs rounds of n_iter steps, restarting from the best iterate,
    until |grad| < tol or max_rounds is reached. The best start wins.
    """
    coords = tuple(coords)
    p = len(coords)
    lower = -np.ones(p) if lower is None else np.asarray(lower, dtype=float)
    upper = np.ones(p) if upper is None else np.asarray(upper, dtype=float)
    if starts is None:
        starts = [lower + np.array(frac) * (upper - lower)
                  for frac in itertools.product((0.25, 0.5, 0.75), repeat=p)]

    def fit(theta: np.ndarray) -> LinearGaussianSpec:
        return spec.with_params(dict(zip(coords, theta)))

    def oracle(theta: np.ndarray) -> np.ndarray:
        return kalman_fd_gradient(fit(theta), data, coords, h_fd)

    if L_est is None:
        L_est = estimate_lipschitz(lambda th, key: oracle(th), lower, upper, seed, n_pairs=20)
    schedule = build_schedule_convex(n_iter, L_est)

    best = None
    outcomes = []
    for theta0 in starts:
        theta, grad_norm = np.asarray(theta0, dtype=float), np.inf
        for _ in range(max_rounds):
            result = aig_run(oracle, theta, schedule, sense="maximize", tol=tol)
            theta, grad_norm = result.best_theta, result.best_grad_norm
            if grad_norm < tol:
                break
        loglik = kalman_loglik(fit(theta), data).loglik
        outcomes.append((theta, loglik))
        if best is None or loglik > best[1]:
            best = (theta, loglik, grad_norm)
    theta, loglik, grad_norm = best
    if grad_norm >= tol:
        logger.warning(f"Kalman MLE gradient norm {grad_norm:.2e} did not reach {tol:g} "
                       f"in {max_rounds} rounds of {n_iter} steps")
    logger.info(f"Kalman MLE over {len(outcomes)} starts: loglik={loglik:.4f}, |grad|={grad_norm:.2e}, "
                f"theta={np.round(theta, 6).tolist()}")
    return KalmanMle(coords, np.array(theta), float(loglik), float(grad_norm), fit(theta), outcomes)
