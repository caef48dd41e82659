"""
SEIH3QS vivax malaria model with relapse.

Seven population classes S, E, I, Q, H1, H2, H3 plus a two-stage delay chain
(kappa, mu_SE) for the force of infection. The latent force is driven by a
periodic cubic B-spline seasonality, a rainfall covariate and multiplicative
Gamma white noise; the system is integrated with Euler-Maruyama steps of
1/20 month. Monthly case counts are negative binomial around
M_n = rho * integral of (mu_EI E + 3 mu_HI H3) over the month.

State vector used by the particle callbacks (d_x = 10):
    S, E, I, Q, H1, H2, H3, kappa, mu_SE, cases
where `cases` accumulates the monthly integral and is reset every interval.
"""
import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import nbinom, poisson

from pomp_core import CovariateTable, ParamTransform, PompModel, RngStream, TimeSeriesData, as_stream

logger = logging.getLogger(__name__)

STATE_NAMES = ("S", "E", "I", "Q", "H1", "H2", "H3", "kappa", "mu_SE")
N_CLASSES = 7
KAPPA, MU_SE, CASES = 7, 8, 9
D_X = 10
IVP_NAMES = ("E_0", "I_0", "Q_0", "H_0", "F_0")
DEFAULT_FREE = ("b1", "b2", "b3", "b4", "b5", "b6", "b_r", "rho", "sigma_obs", "I_0")
CLAMP_WARN_FRACTION = 0.01

LOG_PARAMS = ("mu_EI", "mu_IS", "mu_IQ", "mu_IH", "mu_HI", "mu_QS", "delta", "tau_D",
              "sigma_P", "sigma_obs", "pop", "F_0")
UNIT_PARAMS = ("a", "b", "q", "rho", "E_0", "I_0", "Q_0", "H_0")


@dataclass(frozen=True)
class MalariaSpec:
    """Natural-scale parameters. Rates are per month; h is the Euler step in months."""
    mu_EI: float = 3.0
    mu_IS: float = 1.0
    mu_IQ: float = 1.5
    mu_IH: float = 1.0
    mu_HI: float = 0.1
    mu_QS: float = 0.2
    delta: float = 1.0 / 600.0
    a: float = 0.3
    b: float = 0.5
    q: float = 0.1
    tau_D: float = 0.8
    b1: float = 1.0
    b2: float = 1.2
    b3: float = 1.9
    b4: float = 2.3
    b5: float = 1.8
    b6: float = 1.2
    b_r: float = 0.002
    sigma_P: float = 0.1
    rho: float = 0.5
    sigma_obs: float = 0.2
    pop: float = 500000.0
    E_0: float = 0.001
    I_0: float = 0.002
    Q_0: float = 0.05
    H_0: float = 0.05
    F_0: float = 0.05
    h: float = 1.0 / 20.0

    def __post_init__(self):
        for f in fields(self):
            if not np.isfinite(getattr(self, f.name)):
                raise ValueError(f"Malaria parameter '{f.name}' must be finite")
        for name in ("mu_EI", "mu_IS", "mu_IQ", "mu_IH", "mu_HI", "mu_QS", "delta", "sigma_P",
                     "sigma_obs", "rho", "F_0"):
            if getattr(self, name) < 0:
                raise ValueError(f"Malaria parameter '{name}' must be non-negative")
        for name in ("a", "b", "q", "E_0", "I_0", "Q_0", "H_0"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"Malaria parameter '{name}' must lie in [0, 1]")
        if self.E_0 + self.I_0 + self.Q_0 + self.H_0 > 1:
            raise ValueError("Initial class fractions E_0 + I_0 + Q_0 + H_0 exceed 1")
        if not (self.h > 0 and self.tau_D > 0 and self.pop > 0):
            raise ValueError("h, tau_D and pop must be positive")

    def as_dict(self) -> Dict[str, float]:
        params = asdict(self)
        params.pop("h")
        return params

    def with_params(self, values: Mapping[str, float]) -> "MalariaSpec":
        unknown = [n for n in values if n not in self.as_dict()]
        if unknown:
            raise KeyError(f"Unknown malaria parameters: {unknown}")
        return replace(self, **{k: float(v) for k, v in values.items()})

    def initial_state(self) -> np.ndarray:
        return init_state(self.as_dict())


PARAM_NAMES = tuple(MalariaSpec().as_dict().keys())


def malaria_transform(names: Sequence[str]) -> ParamTransform:
    """log for rates and scales, logit on (0, 1) for fractions, identity for spline and rainfall coefficients."""
    spec = {n: "log" for n in LOG_PARAMS}
    spec.update({n: ("logit", 0.0, 1.0) for n in UNIT_PARAMS})
    return ParamTransform.from_mapping(names, spec)


def periodic_bspline_basis(t: Union[float, np.ndarray], n_basis: int = 6, period: float = 12.0) -> np.ndarray:
    """
    Periodic cubic B-spline basis on equally spaced knots. Returns an array of
    shape t.shape + (n_basis,); rows sum to one.
    """
    if n_basis < 4:
        raise ValueError(f"A periodic cubic basis needs n_basis >= 4, got {n_basis}")
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise ValueError("Basis times must be finite")
    x = t[..., None] * (n_basis / period) - np.arange(n_basis)
    u = np.mod(x, n_basis)
    out = np.zeros(u.shape)
    for lo, poly in ((0, lambda v: v ** 3),
                     (1, lambda v: -3 * v ** 3 + 12 * v ** 2 - 12 * v + 4),
                     (2, lambda v: 3 * v ** 3 - 24 * v ** 2 + 60 * v - 44),
                     (3, lambda v: (4 - v) ** 3)):
        piece = (u >= lo) & (u < lo + 1)
        out[piece] = poly(u[piece]) / 6.0
    return out


def _spline_coefficients(par: Mapping[str, np.ndarray]) -> np.ndarray:
    return np.stack(np.broadcast_arrays(*[np.asarray(par[f"b{i}"], dtype=float) for i in range(1, 7)]), axis=-1)


def _covariate(covariates: Optional[CovariateTable], name: str, t: float, default):
    if covariates is not None and name in covariates.names:
        return covariates.column(name, t)
    return default


def population(par: Mapping[str, np.ndarray], t: float, covariates: Optional[CovariateTable] = None):
    """P(t): constant `pop` unless the covariates carry a `pop` column. dP/dt is taken as 0."""
    return _covariate(covariates, "pop", t, par["pop"])


def _as_params(theta: Union["MalariaSpec", Mapping[str, np.ndarray]]) -> Mapping[str, np.ndarray]:
    return theta.as_dict() if isinstance(theta, MalariaSpec) else theta


def force_of_infection(state: np.ndarray, theta, t: float, covariates: Optional[CovariateTable] = None):
    """Deterministic part of the latent force: (I + qQ)/P exp(sum b_i s_i(t) + b_r R(t))."""
    par = _as_params(theta)
    state = np.asarray(state, dtype=float)
    P = population(par, t, covariates)
    rain = _covariate(covariates, "rainfall", t, 0.0)
    seasonal = np.exp(_spline_coefficients(par) @ periodic_bspline_basis(t) + par["b_r"] * rain)
    return (state[..., 2] + par["q"] * state[..., 3]) / P * seasonal


def gamma_increment(sigma_P, h: float, rng: np.random.Generator, size: Tuple[int, ...] = ()) -> np.ndarray:
    """Gamma white-noise increment with mean h and variance sigma_P^2 h; exactly h when sigma_P = 0."""
    sigma_P = np.broadcast_to(np.asarray(sigma_P, dtype=float), size)
    out = np.full(size, float(h))
    noisy = sigma_P > 0
    if np.any(noisy):
        s2 = np.square(sigma_P[noisy])
        out[noisy] = rng.gamma(h / s2, s2)
    return out


def latent_force(state: np.ndarray, theta, t: float, rng: np.random.Generator, h: float,
                 covariates: Optional[CovariateTable] = None) -> np.ndarray:
    """Integrated latent force over one step: deterministic force times a Gamma increment."""
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    par = _as_params(theta)
    lam = force_of_infection(state, par, t, covariates)
    return lam * gamma_increment(par["sigma_P"], h, rng, np.shape(lam))


def _drift(X: np.ndarray, par: Mapping[str, np.ndarray], lam, P) -> np.ndarray:
    S, E, I, Q, H1, H2, H3, K, F = (X[..., i] for i in range(9))
    d = par["delta"]
    mu_EI, mu_IS, mu_IQ, mu_IH, mu_QS = par["mu_EI"], par["mu_IS"], par["mu_IQ"], par["mu_IH"], par["mu_QS"]
    a, b, tau = par["a"], par["b"], par["tau_D"]
    h3 = 3.0 * par["mu_HI"]
    dS = d * P + mu_IS * I + mu_QS * Q + a * mu_IH * I + b * mu_EI * E - F * S - d * S
    dE = F * S - mu_EI * E - d * E
    dI = (1 - b) * mu_EI * E + h3 * H3 - (mu_IH + mu_IS + mu_IQ) * I - d * I
    dQ = mu_IQ * I - mu_QS * Q - d * Q
    dH1 = (1 - a) * mu_IH * I - h3 * H1 - d * H1
    dH2 = h3 * H1 - h3 * H2 - d * H2
    dH3 = h3 * H2 - h3 * H3 - d * H3
    dK = (lam - K) / tau
    dF = (K - F) / tau
    return np.stack(np.broadcast_arrays(dS, dE, dI, dQ, dH1, dH2, dH3, dK, dF), axis=-1)


def malaria_drift(state: np.ndarray, theta, t: float, covariates: Optional[CovariateTable] = None) -> np.ndarray:
    """Derivative of (S, E, I, Q, H1, H2, H3, kappa, mu_SE) with the noise-free latent force."""
    par = _as_params(theta)
    state = np.asarray(state, dtype=float)
    lam = force_of_infection(state, par, t, covariates)
    return _drift(state, par, lam, population(par, t, covariates))


def euler_step(X: np.ndarray, par: Mapping[str, np.ndarray], t: float, h: float,
               rng: np.random.Generator, covariates: Optional[CovariateTable] = None) -> Tuple[np.ndarray, int]:
    """
    One Euler-Maruyama step of a (..., 10) state array. Returns the new state
    and the number of rows where a compartment had to be clamped at zero.
    """
    P = population(par, t, covariates)
    lam = force_of_infection(X, par, t, covariates)
    noise = gamma_increment(par["sigma_P"], h, rng, np.shape(lam))
    d = _drift(X, par, lam, P)
    new = np.array(X, dtype=float, copy=True)
    new[..., :9] = X[..., :9] + h * d
    new[..., KAPPA] = X[..., KAPPA] + (lam * noise - X[..., KAPPA] * h) / par["tau_D"]
    new[..., CASES] = X[..., CASES] + h * (par["mu_EI"] * X[..., 1] + 3.0 * par["mu_HI"] * X[..., 6])
    negative = new[..., :9] < 0
    clamped = int(np.count_nonzero(np.any(negative, axis=-1)))
    if clamped:
        new[..., :9] = np.maximum(new[..., :9], 0.0)
    return new, clamped


def init_state(par: Mapping[str, np.ndarray], size: Optional[int] = None) -> np.ndarray:
    """Initial state from the class fractions E_0, I_0, Q_0, H_0 (split evenly over H1..H3) and F_0."""
    P = np.asarray(par["pop"], dtype=float)
    shape = () if size is None else (size,)
    frac = {n: np.broadcast_to(np.asarray(par[n], dtype=float), shape) for n in IVP_NAMES}
    P = np.broadcast_to(P, shape)
    X = np.zeros(shape + (D_X,))
    X[..., 1] = frac["E_0"] * P
    X[..., 2] = frac["I_0"] * P
    X[..., 3] = frac["Q_0"] * P
    X[..., 4:7] = (frac["H_0"] * P / 3.0)[..., None]
    X[..., 0] = np.maximum(P - X[..., 1:7].sum(axis=-1), 0.0)
    X[..., KAPPA] = frac["F_0"]
    X[..., MU_SE] = frac["F_0"]
    return X


def negbin_logpdf(y, mean, sigma_obs2) -> np.ndarray:
    """
    Negative binomial log pmf with mean M and variance M + M^2 sigma_obs2:
    size k = 1/sigma_obs2, success probability k/(k + M). sigma_obs2 = 0 is the
    Poisson limit. M = 0 gives 0 for y = 0 and -inf otherwise.
    """
    y, mean, s2 = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(mean, dtype=float),
                                      np.asarray(sigma_obs2, dtype=float))
    if np.any(mean < 0) or np.any(np.isnan(mean)):
        raise ValueError("Negative binomial mean must be non-negative")
    if np.any(s2 < 0):
        raise ValueError("Overdispersion sigma_obs^2 must be non-negative")
    out = np.empty(y.shape)
    zero = mean == 0
    if np.any(zero):
        out[zero] = np.where(y[zero] == 0, 0.0, -np.inf)
        logger.debug(f"Negative binomial mean 0 at {int(np.count_nonzero(zero))} points")
    pois = ~zero & (s2 == 0)
    if np.any(pois):
        out[pois] = poisson.logpmf(y[pois], mean[pois])
    nb = ~zero & (s2 > 0)
    if np.any(nb):
        k = 1.0 / s2[nb]
        out[nb] = nbinom.logpmf(y[nb], k, k / (k + mean[nb]))
    return out if out.ndim else float(out)


def negbin_sample(mean, sigma_obs2, rng: np.random.Generator) -> np.ndarray:
    """Draws with mean M and variance M + M^2 sigma_obs2 (Poisson when sigma_obs2 = 0)."""
    mean, s2 = np.broadcast_arrays(np.asarray(mean, dtype=float), np.asarray(sigma_obs2, dtype=float))
    if np.any(mean < 0):
        raise ValueError("Negative binomial mean must be non-negative")
    out = np.zeros(mean.shape)
    pois = (mean > 0) & (s2 == 0)
    if np.any(pois):
        out[pois] = rng.poisson(mean[pois])
    nb = (mean > 0) & (s2 > 0)
    if np.any(nb):
        k = 1.0 / s2[nb]
        out[nb] = rng.negative_binomial(k, k / (k + mean[nb]))
    return out if out.ndim else float(out)


@dataclass
class MalariaSimulation:
    times: np.ndarray
    states: np.ndarray
    cases: np.ndarray
    y: np.ndarray
    clamped_steps: int
    total_steps: int
    covariates: Optional[CovariateTable] = None

    @property
    def clamp_fraction(self) -> float:
        return self.clamped_steps / self.total_steps if self.total_steps else 0.0

    @property
    def clamp_warning(self) -> bool:
        return self.clamp_fraction > CLAMP_WARN_FRACTION

    def to_data(self) -> TimeSeriesData:
        return TimeSeriesData(self.times, self.y.reshape(-1, 1), self.covariates, t0=0.0)


def _substeps(t0: float, t1: float, h: float) -> Tuple[int, float]:
    n = max(1, int(round((t1 - t0) / h)))
    return n, (t1 - t0) / n


def euler_maruyama_simulate(spec: MalariaSpec, N: int, seed: Union[int, RngStream],
                            covariates: Optional[CovariateTable] = None,
                            x0: Optional[Sequence[float]] = None) -> MalariaSimulation:
    """
    Simulate N months from t = 0 with step spec.h, recording the state at every
    month end, the monthly M_n and a negative binomial count per month.
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    rng = as_stream(seed).generator()
    par = spec.as_dict()
    X = spec.initial_state() if x0 is None else np.concatenate([np.asarray(x0, dtype=float)[:9], [0.0]])
    if np.any(X[:N_CLASSES] < 0):
        raise ValueError("Initial compartments must be non-negative")
    states = np.empty((N + 1, 9))
    states[0] = X[:9]
    cases = np.empty(N)
    clamped = total = 0
    for n in range(1, N + 1):
        steps, h = _substeps(n - 1.0, float(n), spec.h)
        X[CASES] = 0.0
        for k in range(steps):
            X, c = euler_step(X, par, n - 1.0 + k * h, h, rng, covariates)
            clamped += c
        total += steps
        states[n] = X[:9]
        cases[n - 1] = spec.rho * X[CASES]
    y = negbin_sample(cases, spec.sigma_obs ** 2, rng)
    sim = MalariaSimulation(np.arange(1.0, N + 1.0), states, cases, y, clamped, total, covariates)
    if clamped:
        logger.debug(f"Clamped negative compartments at {clamped} of {total} Euler steps")
    if sim.clamp_warning:
        logger.warning(f"Compartments clamped at {sim.clamp_fraction:.1%} of Euler steps; "
                       f"the step size or parameters may be unsuitable")
    return sim


def synthetic_rainfall(n_months: int, seed: Union[int, RngStream], mean: float = 100.0,
                       amplitude: float = 0.8, noise_sd: float = 0.3) -> CovariateTable:
    """Monthly rainfall with an annual cycle and log-normal month-to-month noise."""
    if n_months < 1:
        raise ValueError(f"n_months must be >= 1, got {n_months}")
    rng = as_stream(seed).generator()
    months = np.arange(n_months, dtype=float)
    cycle = np.maximum(1.0 + amplitude * np.sin(2.0 * np.pi * (months + 0.5) / 12.0), 0.0)
    noise = rng.lognormal(-0.5 * noise_sd ** 2, noise_sd, size=n_months)
    return CovariateTable(months, (mean * cycle * noise)[:, None], ("rainfall",))


def malaria_model(spec: Optional[MalariaSpec] = None, free: Sequence[str] = DEFAULT_FREE,
                  name: str = "malaria") -> PompModel:
    """
    PompModel with the named free parameters; everything else stays at `spec`.
    The covariates (rainfall, optionally pop) come from the data.
    """
    spec = MalariaSpec() if spec is None else spec
    free = tuple(free)
    unknown = [n for n in free if n not in PARAM_NAMES]
    if unknown:
        raise ValueError(f"Unknown malaria parameters: {unknown}")
    base = spec.as_dict()
    h = spec.h

    def params(theta: np.ndarray) -> Dict[str, np.ndarray]:
        par = dict(base)
        for i, n in enumerate(free):
            par[n] = theta[:, i]
        return par

    def init_sim(theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return init_state(params(theta), theta.shape[0])

    def trans_sim(x: np.ndarray, theta: np.ndarray, t0: float, t1: float,
                  rng: np.random.Generator, covariates: Optional[CovariateTable] = None) -> np.ndarray:
        par = params(theta)
        steps, dt = _substeps(t0, t1, h)
        x = np.array(x, dtype=float, copy=True)
        x[:, CASES] = 0.0
        clamped = 0
        for k in range(steps):
            x, c = euler_step(x, par, t0 + k * dt, dt, rng, covariates)
            clamped += c
        if clamped > CLAMP_WARN_FRACTION * steps * x.shape[0]:
            logger.debug(f"Clamped {clamped} particle steps on ({t0}, {t1}]")
        return x

    def meas_logpdf(y: np.ndarray, x: np.ndarray, theta: np.ndarray, t: float) -> np.ndarray:
        par = params(theta)
        mean = par["rho"] * x[:, CASES]
        return negbin_logpdf(np.full(x.shape[0], y[0]), mean, np.square(par["sigma_obs"]))

    model = PompModel(name=name, param_names=free, d_x=D_X, d_y=1, init_sim=init_sim, trans_sim=trans_sim,
                      meas_logpdf=meas_logpdf, transform=malaria_transform(free),
                      ivp_names=tuple(n for n in free if n in IVP_NAMES))
    return replace(model, defaults=model.params({n: base[n] for n in free}))
