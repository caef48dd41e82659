"""
Inference drivers built on the perturbed filter: accelerated iterated
filtering (AIF), the first-generation gradient baseline (IF1), the swarm
baseline (IF2), and a multi-start replication harness.

Every driver works on the estimation scale. Starting values are natural-scale
ParameterVectors; traces keep estimation-scale iterates and expose the
natural-scale estimate.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from aig import (AigSchedule, AigState, FlatGradientError, aig_midpoint, aig_step, build_schedule, ck_coefficients,
                 estimate_lipschitz)
from pomp_core import ParameterVector, PompModel, RngStream, TimeSeriesData, as_stream, check_dimensions
from smc import SCORE_MODES, FilterDegeneracyError, PerturbSpec, bootstrap_filter, estimate_score, perturbed_filter
from utils.table_io import write_table

logger = logging.getLogger(__name__)

METHODS = ("aif", "if1", "if2")
CENTERS = ("md_current", "md_previous")
TRACE_SCHEMA = "aifkit.trace/1"
RESULT_SCHEMA = "aifkit.result/1"

# stream ids below a master seed
RUN_STREAM = 1
EVAL_STREAM = 2
START_STREAM = 3
LIPSCHITZ_STREAM = 4

# L used when the score is identically zero; any finite value leaves theta in place
FLAT_SCORE_L = 1.0
# perturbation sd at which the default IF1 gain equals 1/(2 L_est)
IF1_REFERENCE_SIGMA = 0.02


@dataclass(frozen=True)
class MifConfig:
    """
    Settings shared by the iterated filtering drivers.

    policy/delta/L_est build the AIF schedule unless `schedule` is given.
    if1_gamma1 defaults to (sigma / IF1_REFERENCE_SIGMA)^2 / (2 L_est) with sigma the RMS of the
    perturbed non-IVP sds; `if1_gammas` overrides the whole IF1 step sequence.
    ivp_lag=None means the final time N.
    """
    J: int
    M: int
    perturb: PerturbSpec
    policy: str = "convex"
    delta: float = 1.0
    L_est: Optional[float] = None
    schedule: Optional[AigSchedule] = None
    lipschitz_pairs: int = 20
    lipschitz_radius: float = 0.1
    score_mode: str = "sum"
    center: str = "md_current"
    ck_form: str = "proof"
    ivp_lag: Optional[int] = None
    if1_gamma1: Optional[float] = None
    if1_gammas: Optional[Tuple[float, ...]] = None
    seed: int = 0
    J_eval: Optional[int] = None
    K_eval: int = 10
    on_degeneracy: str = "raise"

    def __post_init__(self):
        if self.J < 2:
            raise ValueError(f"J must be >= 2, got {self.J}")
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if self.policy not in ("nonconvex", "convex"):
            raise ValueError(f"Unknown AIF policy '{self.policy}'")
        if self.score_mode not in SCORE_MODES:
            raise ValueError(f"Unknown score mode '{self.score_mode}'")
        if self.center not in CENTERS:
            raise ValueError(f"Unknown score center '{self.center}', expected one of {CENTERS}")
        if self.ck_form not in ("proof", "statement"):
            raise ValueError(f"Unknown C_k form '{self.ck_form}'")
        if self.ivp_lag is not None and self.ivp_lag < 1:
            raise ValueError(f"ivp_lag must be >= 1, got {self.ivp_lag}")
        if self.L_est is not None and not self.L_est > 0:
            raise ValueError(f"L_est must be positive, got {self.L_est}")
        if self.schedule is not None and self.schedule.N < self.M:
            raise ValueError(f"Schedule has {self.schedule.N} steps for M={self.M} iterations")
        if self.if1_gammas is not None and len(self.if1_gammas) < self.M:
            raise ValueError(f"if1_gammas has {len(self.if1_gammas)} entries for M={self.M} iterations")
        if self.J_eval is not None and self.J_eval < 2:
            raise ValueError(f"J_eval must be >= 2, got {self.J_eval}")
        if self.K_eval < 1:
            raise ValueError(f"K_eval must be >= 1, got {self.K_eval}")
        if self.on_degeneracy not in ("raise", "flag"):
            raise ValueError(f"on_degeneracy must be 'raise' or 'flag', got {self.on_degeneracy!r}")

    @property
    def eval_particles(self) -> int:
        return self.J if self.J_eval is None else self.J_eval

    def lag_for(self, data: TimeSeriesData) -> int:
        lag = data.N if self.ivp_lag is None else self.ivp_lag
        if lag > data.N:
            raise ValueError(f"ivp_lag={lag} exceeds the number of observations N={data.N}")
        return lag


@dataclass(frozen=True)
class IterationRecord:
    m: int
    theta: np.ndarray
    theta_ag: np.ndarray
    theta_md: np.ndarray
    score: np.ndarray
    loglik: float
    wall_time: float


@dataclass
class EstimationTrace:
    method: str
    names: Tuple[str, ...]
    records: List[IterationRecord]
    estimate: np.ndarray
    estimate_natural: np.ndarray
    L_est: Optional[float] = None
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.records)

    @property
    def thetas(self) -> np.ndarray:
        return np.array([r.theta for r in self.records])

    @property
    def logliks(self) -> np.ndarray:
        return np.array([r.loglik for r in self.records])

    @property
    def wall_seconds(self) -> float:
        return float(sum(r.wall_time for r in self.records))

    def estimate_vector(self) -> ParameterVector:
        """Natural-scale estimate."""
        return ParameterVector(self.estimate_natural, self.names)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.records:
            row = {"m": r.m}
            for key, arr in (("theta", r.theta), ("theta_ag", r.theta_ag), ("theta_md", r.theta_md), ("score", r.score)):
                row.update({f"{key}_{i + 1}": arr[i] for i in range(len(self.names))})
            row["loglik"] = r.loglik
            row["wall_time"] = r.wall_time
            rows.append(row)
        return pd.DataFrame(rows)

    def to_csv(self, path: Union[str, Path]) -> Path:
        meta = {"method": self.method, "names": list(self.names)}
        if self.L_est is not None:
            meta["L_est"] = repr(float(self.L_est))
        return write_table(self.to_frame(), path, TRACE_SCHEMA, meta)


def _estimation_vector(m: PompModel, values: np.ndarray) -> ParameterVector:
    return ParameterVector(values, m.param_names, m.ivp_mask)


def _start(m: PompModel, data: TimeSeriesData, theta0: ParameterVector, cfg: MifConfig) -> np.ndarray:
    check_dimensions(m, theta0, data)
    if cfg.perturb.p != m.p:
        raise ValueError(f"PerturbSpec has {cfg.perturb.p} sigmas, model '{m.name}' has {m.p} parameters")
    if not np.array_equal(cfg.perturb.ivp_mask, m.ivp_mask):
        raise ValueError(f"PerturbSpec IVP flags do not match model '{m.name}'")
    return np.array(m.to_estimation(theta0).values, dtype=float)


def _filter(m: PompModel, center: np.ndarray, data: TimeSeriesData, cfg: MifConfig, it: int,
            stream: RngStream, initial_swarm: Optional[np.ndarray] = None):
    try:
        return perturbed_filter(m, _estimation_vector(m, center), data, cfg.J, cfg.perturb, it,
                                stream.child(it), initial_swarm=initial_swarm, on_degeneracy=cfg.on_degeneracy)
    except FilterDegeneracyError as exc:
        logger.error(f"Filter degeneracy at iteration m={it}, n={exc.n}")
        raise FilterDegeneracyError(exc.n, it) from exc


def score_at(m: PompModel, data: TimeSeriesData, theta_est: np.ndarray, cfg: MifConfig,
             stream: RngStream, it: int = 1) -> np.ndarray:
    """Score estimate from one perturbed filter centered at estimation-scale theta_est."""
    f = _filter(m, np.asarray(theta_est, dtype=float), data, cfg, it, stream)
    return estimate_score(f, _estimation_vector(m, theta_est), cfg.perturb, it, cfg.score_mode)


def estimate_score_lipschitz(m: PompModel, data: TimeSeriesData, cfg: MifConfig,
                             lower: Sequence[float], upper: Sequence[float],
                             stream: RngStream) -> float:
    """
    Lipschitz estimate of the score over an estimation-scale box. Both points
    of a pair share one filter stream so their difference is not dominated by
    independent Monte Carlo noise.
    """
    if not np.any(_active_sigmas(cfg.perturb) > 0):
        logger.warning(f"No perturbed non-IVP parameter, the score is zero; using L_est={FLAT_SCORE_L}")
        return FLAT_SCORE_L

    def grad(theta: np.ndarray, key: int) -> np.ndarray:
        return score_at(m, data, theta, cfg, stream.child(key))

    try:
        return estimate_lipschitz(grad, lower, upper, stream.child(cfg.lipschitz_pairs + 1),
                                  n_pairs=cfg.lipschitz_pairs, radius=cfg.lipschitz_radius)
    except FlatGradientError as exc:
        logger.warning(f"{exc}: score differences were all zero; using L_est={FLAT_SCORE_L}")
        return FLAT_SCORE_L


def _active_sigmas(perturb: PerturbSpec) -> np.ndarray:
    return perturb.sigmas[~perturb.ivp_mask]


def _resolve_L(m: PompModel, data: TimeSeriesData, theta: np.ndarray, cfg: MifConfig, stream: RngStream) -> float:
    if cfg.L_est is not None:
        return float(cfg.L_est)
    r = cfg.lipschitz_radius
    logger.info(f"No L_est supplied; estimating around the starting point (radius {r})")
    return estimate_score_lipschitz(m, data, cfg, theta - r, theta + r,
                                    RngStream(stream.seed, LIPSCHITZ_STREAM, stream.path))


def _set_ivps(m: PompModel, theta: np.ndarray, lag_mean: np.ndarray) -> np.ndarray:
    mask = m.ivp_mask
    if not mask.any():
        return theta
    theta = theta.copy()
    theta[mask] = lag_mean[mask]
    return theta


def _finish(method: str, m: PompModel, records: List[IterationRecord], estimate: np.ndarray,
            L_est: Optional[float], meta: Optional[Dict[str, object]] = None) -> EstimationTrace:
    natural = m.transform.inverse(estimate)
    logger.info(f"{method.upper()} finished after {len(records)} iterations: "
                f"loglik_M={records[-1].loglik:.3f}, estimate={np.round(natural, 5).tolist()}")
    return EstimationTrace(method, m.param_names, records, estimate, natural, L_est, meta or {})


def aif_run(m: PompModel, data: TimeSeriesData, theta0: ParameterVector, cfg: MifConfig,
            stream: Optional[RngStream] = None) -> EstimationTrace:
    """
    Accelerated iterated filtering.

    Each iteration filters with parameter particles centered at theta^md_m,
    turns the filter means into a score S_m, and takes an AIG step on -loglik
    with gradient -S_m (an ascent step on the log likelihood). IVP coordinates
    of theta_m and theta^ag_m are then set to the filter mean at lag ivp_lag.
    The estimate is theta^ag_M.
    """
    stream = as_stream(cfg.seed) if stream is None else stream
    theta = _start(m, data, theta0, cfg)
    lag = cfg.lag_for(data)
    if cfg.schedule is not None:
        schedule = cfg.schedule
        L_est = schedule.L_est
    else:
        L_est = _resolve_L(m, data, theta, cfg, stream)
        schedule = build_schedule(cfg.policy, cfg.M, L_est, cfg.delta)
    meta = {}
    if np.isfinite(L_est):
        ck = ck_coefficients(schedule, L_est, cfg.ck_form)
        meta["nonpositive_ck"] = int(np.sum(~(ck[:cfg.M] > 0)))

    state = AigState.initial(theta)
    previous_md = theta.copy()
    records = []
    for it in range(1, cfg.M + 1):
        started = time.perf_counter()
        md = aig_midpoint(state, schedule)
        f = _filter(m, md, data, cfg, it, stream)
        ref = md if cfg.center == "md_current" else previous_md
        score = estimate_score(f, _estimation_vector(m, ref), cfg.perturb, it, cfg.score_mode)
        state = aig_step(state, schedule, -score, objective=-f.loglik)
        lag_mean = f.lag_mean(lag)
        state = replace(state, theta=_set_ivps(m, state.theta, lag_mean),
                        theta_ag=_set_ivps(m, state.theta_ag, lag_mean))
        previous_md = md
        elapsed = time.perf_counter() - started
        records.append(IterationRecord(it, state.theta.copy(), state.theta_ag.copy(), md.copy(),
                                       score, f.loglik, elapsed))
        logger.debug(f"AIF m={it}: loglik={f.loglik:.3f}, |S|={np.linalg.norm(score):.4g}")

    return _finish("aif", m, records, state.theta_ag.copy(), L_est, meta)


def if1_gammas(cfg: MifConfig, L_est: Optional[float]) -> np.ndarray:
    """
    gamma_m = gamma_1 c^{2(m-1)} unless an explicit sequence is configured.
    The default gamma_1 is proportional to the squared perturbation scale.
    """
    if cfg.if1_gammas is not None:
        return np.asarray(cfg.if1_gammas[:cfg.M], dtype=float)
    gamma1 = cfg.if1_gamma1
    if gamma1 is None:
        if L_est is None:
            raise ValueError("IF1 needs if1_gamma1 or L_est")
        active = _active_sigmas(cfg.perturb)
        rms = float(np.sqrt(np.mean(np.square(active)))) if active.size else 0.0
        gamma1 = (rms / IF1_REFERENCE_SIGMA) ** 2 / (2.0 * L_est)
    return gamma1 * cfg.perturb.cooling_c ** (2.0 * np.arange(cfg.M))


def if1_run(m: PompModel, data: TimeSeriesData, theta0: ParameterVector, cfg: MifConfig,
            stream: Optional[RngStream] = None) -> EstimationTrace:
    """First-generation iterated filtering: theta_m = theta_{m-1} + gamma_m S_m."""
    stream = as_stream(cfg.seed) if stream is None else stream
    theta = _start(m, data, theta0, cfg)
    lag = cfg.lag_for(data)
    L_est = None
    if cfg.if1_gammas is None and cfg.if1_gamma1 is None:
        L_est = _resolve_L(m, data, theta, cfg, stream)
    gammas = if1_gammas(cfg, L_est)

    records = []
    for it in range(1, cfg.M + 1):
        started = time.perf_counter()
        center = theta
        f = _filter(m, center, data, cfg, it, stream)
        score = estimate_score(f, _estimation_vector(m, center), cfg.perturb, it, cfg.score_mode)
        theta = _set_ivps(m, center + gammas[it - 1] * score, f.lag_mean(lag))
        elapsed = time.perf_counter() - started
        records.append(IterationRecord(it, theta.copy(), theta.copy(), center.copy(), score, f.loglik, elapsed))
        logger.debug(f"IF1 m={it}: loglik={f.loglik:.3f}, gamma={gammas[it - 1]:.4g}")

    return _finish("if1", m, records, theta.copy(), L_est)


def if2_run(m: PompModel, data: TimeSeriesData, theta0: ParameterVector, cfg: MifConfig,
            stream: Optional[RngStream] = None) -> EstimationTrace:
    """
    Swarm iterated filtering: the final parameter swarm of iteration m is
    re-perturbed (not re-centered) to start iteration m+1, and theta_m is the
    final-time swarm mean.
    """
    stream = as_stream(cfg.seed) if stream is None else stream
    theta = _start(m, data, theta0, cfg)
    swarm = None
    no_score = np.full(m.p, np.nan)
    records = []
    for it in range(1, cfg.M + 1):
        started = time.perf_counter()
        f = _filter(m, theta, data, cfg, it, stream, initial_swarm=swarm)
        swarm = f.final_swarm
        center = theta
        theta = np.array(f.lag_mean(data.N), dtype=float)
        elapsed = time.perf_counter() - started
        records.append(IterationRecord(it, theta.copy(), theta.copy(), center.copy(), no_score, f.loglik, elapsed))
        logger.debug(f"IF2 m={it}: loglik={f.loglik:.3f}")

    return _finish("if2", m, records, theta.copy(), None)


RUNNERS: Dict[str, Callable[..., EstimationTrace]] = {"aif": aif_run, "if1": if1_run, "if2": if2_run}


def evaluate_loglik(m: PompModel, theta_natural: ParameterVector, data: TimeSeriesData, J_eval: int,
                    K: int, master_seed: int) -> Tuple[float, np.ndarray]:
    """
    Median of K bootstrap filter logliks. The evaluation seeds depend only on
    the master seed, so every method and replication is scored with the same filters.
    """
    theta_est = m.to_estimation(theta_natural)
    values = np.array([bootstrap_filter(m, theta_est, data, J_eval, RngStream(master_seed, EVAL_STREAM, (k,))).loglik
                       for k in range(K)])
    return float(np.median(values)), values


@dataclass
class ExperimentResult:
    method: str
    names: Tuple[str, ...]
    rows: List[Dict[str, object]]
    traces: List[Optional[EstimationTrace]] = field(default_factory=list)
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.rows if r["status"] != "ok")

    @property
    def logliks(self) -> np.ndarray:
        return np.array([r["loglik"] for r in self.rows], dtype=float)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=result_columns(len(self.names)))

    def to_csv(self, path: Union[str, Path], extra_meta: Optional[Dict[str, object]] = None) -> Path:
        meta = {"names": list(self.names)}
        meta.update(self.meta)
        meta.update(extra_meta or {})
        return write_table(self.to_frame(), path, RESULT_SCHEMA, meta)


def result_columns(p: int) -> List[str]:
    return (["method", "rep", "seed", "stream_id"] + [f"start_{i + 1}" for i in range(p)]
            + [f"final_{i + 1}" for i in range(p)] + ["loglik", "wall_seconds", "status"])


def draw_starts(lower: Sequence[float], upper: Sequence[float], R: int, master_seed: int) -> np.ndarray:
    """R uniform natural-scale starts from the start box, drawn up front from a dedicated stream."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.shape != upper.shape or not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        raise ValueError("Start box bounds must be finite and of equal length")
    if np.any(lower > upper):
        raise ValueError("Start box lower bounds must not exceed upper bounds")
    rng = RngStream(master_seed, START_STREAM).generator()
    return rng.uniform(lower, upper, size=(R, len(lower)))


def replicate_search(method: str, m: PompModel, data: TimeSeriesData,
                     box: Tuple[Sequence[float], Sequence[float]], R: int, cfg: MifConfig,
                     master_seed: int, workers: int = 1, progress: bool = True) -> ExperimentResult:
    """
    R independent runs of one method from uniform starts in a natural-scale box.

    Each replication r uses the stream (seed, stream_id, r) recorded in its row; the result
    rows are in replication order and do not depend on the number of workers.
    A failed replication becomes a row with a non-ok status.
    """
    if method not in RUNNERS:
        raise ValueError(f"Unknown method '{method}', expected one of {METHODS}")
    if R < 1:
        raise ValueError(f"R must be >= 1, got {R}")
    lower, upper = box
    starts = draw_starts(lower, upper, R, master_seed)
    if starts.shape[1] != m.p:
        raise ValueError(f"Start box has {starts.shape[1]} coordinates, model '{m.name}' has {m.p}")

    needs_L = (method == "aif" and cfg.schedule is None) or \
              (method == "if1" and cfg.if1_gammas is None and cfg.if1_gamma1 is None)
    if needs_L and cfg.L_est is None:
        est_lower = m.transform.forward(np.asarray(lower, dtype=float))
        est_upper = m.transform.forward(np.asarray(upper, dtype=float))
        L_est = estimate_score_lipschitz(m, data, cfg, est_lower, est_upper,
                                         RngStream(master_seed, LIPSCHITZ_STREAM))
        cfg = replace(cfg, L_est=L_est)

    runner = RUNNERS[method]
    J_eval = cfg.eval_particles

    def run_one(r: int) -> Tuple[Dict[str, object], Optional[EstimationTrace]]:
        row = {"method": method, "rep": r, "seed": master_seed, "stream_id": RUN_STREAM}
        row.update({f"start_{i + 1}": starts[r, i] for i in range(m.p)})
        try:
            theta0 = m.params(starts[r])
            started = time.perf_counter()
            trace = runner(m, data, theta0, cfg, RngStream(master_seed, RUN_STREAM, (r,)))
            wall = time.perf_counter() - started
            loglik, _ = evaluate_loglik(m, m.params(trace.estimate_natural),
                                        data, J_eval, cfg.K_eval, master_seed)
            row.update({f"final_{i + 1}": trace.estimate_natural[i] for i in range(m.p)})
            row.update({"loglik": loglik, "wall_seconds": wall, "status": "ok"})
            logger.info(f"{method} replication {r} done: loglik={loglik:.3f} ({wall:.2f}s)")
            return row, trace
        except Exception as exc:
            logger.error(f"{method} replication {r} failed: {exc}")
            row.update({f"final_{i + 1}": np.nan for i in range(m.p)})
            row.update({"loglik": np.nan, "wall_seconds": np.nan, "status": f"failed: {exc}"})
            return row, None

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        outcomes = list(tqdm(executor.map(run_one, range(R)), total=R,
                             desc=f"{method} replications", disable=not progress))

    rows = [o[0] for o in outcomes]
    traces = [o[1] for o in outcomes]
    meta = {"J_eval": J_eval, "K_eval": cfg.K_eval}
    if cfg.L_est is not None:
        meta["L_est"] = repr(float(cfg.L_est))
    result = ExperimentResult(method, m.param_names, rows, traces, meta)
    if result.n_failed:
        logger.warning(f"{result.n_failed} of {R} {method} replications failed")
    return result
