"""
Core POMP abstractions: parameter vectors and transforms, time-series data,
the model interface and the seeded random stream contract.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from utils.table_io import SchemaError, read_table, write_table

logger = logging.getLogger(__name__)

TRANSFORM_KINDS = ("identity", "log", "logit")
DATA_SCHEMA = "aifkit.data/1"
COVARIATE_SCHEMA = "aifkit.covariates/1"


class ModelValidationError(ValueError):
    """Raised when a model produces non-finite output or has mismatched dimensions."""

    def __init__(self, message: str, n: Optional[int] = None):
        super().__init__(message)
        self.n = n


@dataclass(frozen=True)
class ParameterVector:
    """
    Named parameter vector. `ivp_mask` marks initial-value parameters.
    Whether `values` are natural or estimation scale depends on the caller.
    """
    values: np.ndarray
    names: Tuple[str, ...]
    ivp_mask: np.ndarray = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        names = tuple(self.names)
        mask = np.zeros(len(names), dtype=bool) if self.ivp_mask is None \
            else np.array(self.ivp_mask, dtype=bool).reshape(-1)
        if len(names) < 1:
            raise ValueError("ParameterVector needs at least one coordinate")
        if not (len(values) == len(names) == len(mask)):
            raise ValueError(
                f"Length mismatch: {len(values)} values, {len(names)} names, {len(mask)} IVP flags")
        if len(set(names)) != len(names):
            raise ValueError(f"Duplicate parameter names: {names}")
        bad = [n for n, v in zip(names, values) if not np.isfinite(v)]
        if bad:
            raise ValueError(f"Non-finite parameter values for: {', '.join(bad)}")
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "ivp_mask", mask)

    @property
    def p(self) -> int:
        return len(self.names)

    @classmethod
    def from_dict(cls, values: Mapping[str, float], ivps: Iterable[str] = ()) -> "ParameterVector":
        names = tuple(values.keys())
        ivps = set(ivps)
        return cls(np.array([values[n] for n in names], dtype=float), names,
                   np.array([n in ivps for n in names], dtype=bool))

    def with_values(self, values: Sequence[float]) -> "ParameterVector":
        return ParameterVector(np.asarray(values, dtype=float), self.names, self.ivp_mask)

    def as_dict(self) -> Dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values)}

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])


@dataclass(frozen=True)
class ParamTransform:
    """
    Per-coordinate natural <-> estimation scale maps.

    kinds: one of "identity", "log", "logit" per coordinate. Logit coordinates
    map the open interval (lower, upper) onto the real line.
    """
    names: Tuple[str, ...]
    kinds: Tuple[str, ...]
    lower: np.ndarray = None
    upper: np.ndarray = None

    def __post_init__(self):
        p = len(self.names)
        if len(self.kinds) != p:
            raise ValueError(f"Transform has {len(self.kinds)} kinds for {p} names")
        for name, kind in zip(self.names, self.kinds):
            if kind not in TRANSFORM_KINDS:
                raise ValueError(f"Unknown transform '{kind}' for coordinate '{name}'")
        lower = np.zeros(p) if self.lower is None else np.asarray(self.lower, dtype=float)
        upper = np.ones(p) if self.upper is None else np.asarray(self.upper, dtype=float)
        for i, kind in enumerate(self.kinds):
            if kind == "logit" and not lower[i] < upper[i]:
                raise ValueError(f"Logit bounds for '{self.names[i]}' must satisfy lower < upper")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def identity(cls, names: Sequence[str]) -> "ParamTransform":
        return cls(tuple(names), ("identity",) * len(names))

    @classmethod
    def from_mapping(cls, names: Sequence[str],
                     spec: Mapping[str, Union[str, Tuple[str, float, float]]]) -> "ParamTransform":
        """Build from {name: "log"} or {name: ("logit", lo, hi)}; unlisted names are identity."""
        kinds, lower, upper = [], [], []
        for name in names:
            entry = spec.get(name, "identity")
            if isinstance(entry, str):
                kinds.append(entry)
                lower.append(0.0)
                upper.append(1.0)
            else:
                kind, lo, hi = entry
                kinds.append(kind)
                lower.append(lo)
                upper.append(hi)
        return cls(tuple(names), tuple(kinds), np.array(lower), np.array(upper))

    def _check_domain(self, x: np.ndarray) -> None:
        for i, kind in enumerate(self.kinds):
            col = x[..., i]
            if kind == "log" and np.any(col <= 0):
                raise ValueError(f"Coordinate '{self.names[i]}' must be positive for a log transform")
            if kind == "logit" and np.any((col <= self.lower[i]) | (col >= self.upper[i])):
                raise ValueError(
                    f"Coordinate '{self.names[i]}' must lie in ({self.lower[i]}, {self.upper[i]})")

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Natural -> estimation scale; works on (..., p) arrays."""
        x = np.asarray(x, dtype=float)
        self._check_domain(x)
        z = np.array(x, copy=True)
        for i, kind in enumerate(self.kinds):
            if kind == "log":
                z[..., i] = np.log(x[..., i])
            elif kind == "logit":
                lo, hi = self.lower[i], self.upper[i]
                z[..., i] = logit((x[..., i] - lo) / (hi - lo))
        return z

    def inverse(self, z: np.ndarray) -> np.ndarray:
        """Estimation -> natural scale; works on (..., p) arrays."""
        z = np.asarray(z, dtype=float)
        x = np.array(z, copy=True)
        for i, kind in enumerate(self.kinds):
            if kind == "log":
                x[..., i] = np.exp(z[..., i])
            elif kind == "logit":
                lo, hi = self.lower[i], self.upper[i]
                x[..., i] = lo + (hi - lo) * expit(z[..., i])
        return x


def transform_params(theta_nat: ParameterVector, t: ParamTransform) -> ParameterVector:
    """Map a natural-scale vector to the estimation scale."""
    if tuple(theta_nat.names) != tuple(t.names):
        raise ValueError(f"Transform names {t.names} do not match parameters {theta_nat.names}")
    return theta_nat.with_values(t.forward(theta_nat.values))


def inverse_transform_params(theta_est: ParameterVector, t: ParamTransform) -> ParameterVector:
    """Map an estimation-scale vector back to the natural scale."""
    if tuple(theta_est.names) != tuple(t.names):
        raise ValueError(f"Transform names {t.names} do not match parameters {theta_est.names}")
    return theta_est.with_values(t.inverse(theta_est.values))


@dataclass(frozen=True)
class CovariateTable:
    """Covariates with piecewise-constant lookup: the row in force at time t is the last row with time <= t."""
    times: np.ndarray
    values: np.ndarray
    names: Tuple[str, ...]

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float).reshape(len(times), -1)
        if len(times) == 0:
            raise ValueError("Covariate table is empty")
        if np.any(np.diff(times) <= 0):
            raise ValueError("Covariate times must be strictly increasing")
        if values.shape[1] != len(self.names):
            raise ValueError(f"Covariate table has {values.shape[1]} columns for names {self.names}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", tuple(self.names))

    def lookup(self, t: float) -> np.ndarray:
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.values[max(idx, 0)]

    def column(self, name: str, t: float) -> float:
        return float(self.lookup(t)[self.names.index(name)])

    def to_csv(self, path: Union[str, Path]) -> Path:
        df = pd.DataFrame(self.values, columns=list(self.names))
        df.insert(0, "time", self.times)
        return write_table(df, path, COVARIATE_SCHEMA)

    @classmethod
    def from_csv(cls, path: Union[str, Path], time_column: str = "time") -> "CovariateTable":
        """Covariate CSV; a header comment line is optional, e.g. a plain (month, rainfall) file."""
        df, meta = read_table(path)
        if time_column not in df.columns:
            time_column = df.columns[0]
        names = tuple(c for c in df.columns if c != time_column)
        return cls(df[time_column].to_numpy(dtype=float), df[list(names)].to_numpy(dtype=float), names)


@dataclass(frozen=True)
class TimeSeriesData:
    """Observation times, observation rows (N x d_y), optional covariates and the initial time t0."""
    times: np.ndarray
    observations: np.ndarray
    covariates: Optional[CovariateTable] = None
    t0: float = 0.0

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim == 1:
            obs = obs.reshape(len(times), -1) if len(times) else obs.reshape(0, 1)
        if obs.shape[0] != len(times):
            raise ValueError(f"{len(times)} times but {obs.shape[0]} observation rows")
        if np.any(np.diff(times) <= 0):
            raise ValueError("Observation times must be strictly increasing")
        if len(times) and not self.t0 < times[0]:
            raise ValueError(f"t0={self.t0} must precede the first observation time {times[0]}")
        missing = np.flatnonzero(~np.all(np.isfinite(obs), axis=1))
        if missing.size:
            raise ValueError(f"Missing or non-finite observation rows at n={missing[0] + 1}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "observations", obs)

    @property
    def N(self) -> int:
        return len(self.times)

    @property
    def d_y(self) -> int:
        return self.observations.shape[1]

    def interval(self, n: int) -> Tuple[float, float]:
        """(t_{n-1}, t_n) for 1-based n."""
        start = self.t0 if n == 1 else self.times[n - 2]
        return float(start), float(self.times[n - 1])

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"time": self.times})
        for i in range(self.d_y):
            df[f"y_{i + 1}"] = self.observations[:, i]
        return df

    def to_csv(self, path: Union[str, Path], meta: Optional[Mapping[str, object]] = None) -> Path:
        header = {"t0": repr(float(self.t0))}
        header.update(meta or {})
        return write_table(self.to_frame(), path, DATA_SCHEMA, header)

    @classmethod
    def from_csv(cls, path: Union[str, Path], covariates: Optional[CovariateTable] = None) -> "TimeSeriesData":
        df, meta = read_table(path, DATA_SCHEMA, required_columns=("time",))
        y_cols = [c for c in df.columns if c.startswith("y_")]
        if not y_cols:
            raise SchemaError(f"{path}: no observation columns y_1..y_d")
        t0 = float(meta.get("t0", 0.0))
        return cls(df["time"].to_numpy(dtype=float), df[y_cols].to_numpy(dtype=float), covariates, t0)


InitSim = Callable[[np.ndarray, np.random.Generator], np.ndarray]
TransSim = Callable[[np.ndarray, np.ndarray, float, float, np.random.Generator, Optional[CovariateTable]], np.ndarray]
MeasLogpdf = Callable[[np.ndarray, np.ndarray, np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class PompModel:
    """
    A partially observed Markov process model.

    Callbacks are vectorized over particles and always receive natural-scale
    parameters with columns ordered as `param_names`:
      init_sim(theta[J,p], rng) -> x0[J,d_x]
      trans_sim(x[J,d_x], theta[J,p], t0, t1, rng, covariates) -> x[J,d_x]
      meas_logpdf(y[d_y], x[J,d_x], theta[J,p], t) -> [J]
    """
    name: str
    param_names: Tuple[str, ...]
    d_x: int
    d_y: int
    init_sim: InitSim
    trans_sim: TransSim
    meas_logpdf: MeasLogpdf
    transform: ParamTransform
    ivp_names: Tuple[str, ...] = ()
    defaults: Optional[ParameterVector] = None

    @property
    def p(self) -> int:
        return len(self.param_names)

    @property
    def ivp_mask(self) -> np.ndarray:
        return np.array([n in self.ivp_names for n in self.param_names], dtype=bool)

    def params(self, values: Union[Mapping[str, float], Sequence[float]]) -> ParameterVector:
        """Natural-scale ParameterVector in model order."""
        if isinstance(values, Mapping):
            values = [values[n] for n in self.param_names]
        return ParameterVector(np.asarray(values, dtype=float), self.param_names, self.ivp_mask)

    def to_estimation(self, theta_nat: ParameterVector) -> ParameterVector:
        return transform_params(theta_nat, self.transform)

    def to_natural(self, theta_est: ParameterVector) -> ParameterVector:
        return inverse_transform_params(theta_est, self.transform)


@dataclass(frozen=True)
class RngStream:
    """
    A reproducible random stream identified by (seed, stream_id, path).

    Streams are derived with numpy SeedSequence spawn keys, so identical
    identifiers reproduce identical draws no matter which worker runs them.
    """
    seed: int
    stream_id: int = 0
    path: Tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.seed < 0 or self.stream_id < 0:
            raise ValueError("Seed and stream_id must be non-negative 64-bit integers")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed),
                                    spawn_key=(int(self.stream_id),) + tuple(int(i) for i in self.path))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + tuple(int(i) for i in ids))


def as_stream(seed: Union[int, RngStream, None]) -> RngStream:
    if isinstance(seed, RngStream):
        return seed
    if seed is None:
        raise ValueError("A seed is required for reproducible runs")
    return RngStream(int(seed))


@dataclass(frozen=True)
class ValidationReport:
    status: str
    n_evaluations: int
    neg_inf_times: Tuple[int, ...]
    digest: str

    def to_text(self) -> str:
        lines = [f"status: {self.status}", f"evaluations: {self.n_evaluations}",
                 f"neg_inf_times: {','.join(map(str, self.neg_inf_times)) or '-'}",
                 f"digest: {self.digest}"]
        return "\n".join(lines) + "\n"


def check_dimensions(m: PompModel, theta: ParameterVector, data: TimeSeriesData) -> None:
    if tuple(theta.names) != tuple(m.param_names):
        raise ModelValidationError(f"Parameter names {theta.names} do not match model {m.param_names}")
    if data.d_y != m.d_y:
        raise ModelValidationError(f"Data has d_y={data.d_y}, model '{m.name}' expects {m.d_y}")


def validate_model(m: PompModel, theta: ParameterVector, data: TimeSeriesData,
                   seed: Union[int, RngStream]) -> ValidationReport:
    """
    Simulate one trajectory at natural-scale `theta` and evaluate the
    measurement density at every observation time.
    """
    check_dimensions(m, theta, data)
    rng = as_stream(seed).generator()
    th = theta.values[None, :]
    x = np.asarray(m.init_sim(th, rng), dtype=float)
    if x.shape != (1, m.d_x):
        raise ModelValidationError(f"init_sim returned shape {x.shape}, expected (1, {m.d_x})", n=0)
    if not np.all(np.isfinite(x)):
        raise ModelValidationError("Non-finite initial state", n=0)

    logpdfs = np.empty(data.N)
    neg_inf = []
    for n in range(1, data.N + 1):
        t_prev, t_n = data.interval(n)
        x = np.asarray(m.trans_sim(x, th, t_prev, t_n, rng, data.covariates), dtype=float)
        if not np.all(np.isfinite(x)):
            raise ModelValidationError(f"Non-finite simulated state at n={n}", n=n)
        lp = float(np.asarray(m.meas_logpdf(data.observations[n - 1], x, th, t_n)).reshape(-1)[0])
        if np.isnan(lp):
            raise ModelValidationError(f"meas_logpdf returned NaN at n={n}", n=n)
        if lp == -np.inf:
            neg_inf.append(n)
        logpdfs[n - 1] = lp

    digest = hashlib.sha256(logpdfs.tobytes()).hexdigest()
    status = "ok" if not neg_inf else "neg-inf"
    if neg_inf:
        logger.warning(f"Model '{m.name}': measurement density is -inf at n={neg_inf[:10]}")
    return ValidationReport(status, data.N, tuple(neg_inf), digest)
