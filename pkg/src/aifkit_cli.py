"""
Command-line front end: simulate datasets, run filters, run estimation
methods with replication, time the methods and summarize result tables.

    python run_aifkit.py estimate --config configs/toy.json --workers 4 --out results/
"""
import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from estimators import (LIPSCHITZ_STREAM, RESULT_SCHEMA, RUN_STREAM, RUNNERS, ExperimentResult, MifConfig,
                        estimate_score_lipschitz, replicate_search)
from models.linear_gaussian import LinearGaussianSpec, kalman_loglik, kalman_mle, lg_simulate, linear_gaussian_model
from models.malaria import MalariaSpec, euler_maruyama_simulate, malaria_model, synthetic_rainfall
from pomp_core import CovariateTable, PompModel, RngStream, TimeSeriesData
from smc import PerturbSpec, bootstrap_filter
from utils.config_manager import ConfigManager, RunConfig
from utils.table_io import SchemaError, read_table, write_table

logger = logging.getLogger(__name__)

KALMAN_SCHEMA = "aifkit.kalman/1"
BENCHMARK_SCHEMA = "aifkit.benchmark/1"
SUMMARY_SCHEMA = "aifkit.summary/1"
DENSITY_SCHEMA = "aifkit.density/1"
SIDECAR_SCHEMA = "aifkit.data-meta/1"

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2


def build_model(cfg: RunConfig) -> Tuple[PompModel, object]:
    """The configured model and its full natural-scale parameter spec."""
    if cfg.model_id == "linear_gaussian":
        spec = LinearGaussianSpec.toy().with_params(cfg.model_params)
        return linear_gaussian_model(spec, cfg.free), spec
    spec = MalariaSpec().with_params(cfg.model_params)
    return malaria_model(spec, cfg.free), spec


def simulate_data(cfg: RunConfig, spec) -> Tuple[TimeSeriesData, Dict[str, object]]:
    sim_spec = spec.with_params(cfg.sim_params)
    stream = RngStream(cfg.sim_seed)
    if cfg.model_id == "linear_gaussian":
        data = lg_simulate(sim_spec, cfg.sim_N, stream)
        params = {n: sim_spec.get(n) for n in ("alpha_1", "alpha_2", "alpha_3", "alpha_4", "x0_1", "x0_2")}
    else:
        if cfg.sim_N < 1:
            raise ValueError(f"N must be >= 1, got {cfg.sim_N}")
        covariates = CovariateTable.from_csv(cfg.covariates_path) if cfg.covariates_path \
            else synthetic_rainfall(cfg.sim_N, stream.child(1))
        sim = euler_maruyama_simulate(sim_spec, cfg.sim_N, stream.child(0), covariates)
        data = sim.to_data()
        params = sim_spec.as_dict()
    meta = {"schema": SIDECAR_SCHEMA, "model": cfg.model_id, "params": params,
            "seed": cfg.sim_seed, "N": cfg.sim_N}
    return data, meta


def load_data(cfg: RunConfig, spec) -> TimeSeriesData:
    """Data from data.path (with covariates from the config or the JSON sidecar), or simulated in memory."""
    if cfg.data_path is None:
        return simulate_data(cfg, spec)[0]
    covariates_path = cfg.covariates_path
    sidecar = cfg.data_path.with_suffix(".json")
    if covariates_path is None and sidecar.exists():
        with open(sidecar, "r", encoding="utf-8") as f:
            name = json.load(f).get("covariates")
        if name:
            covariates_path = cfg.data_path.parent / name
    covariates = CovariateTable.from_csv(covariates_path) if covariates_path else None
    data = TimeSeriesData.from_csv(cfg.data_path, covariates)
    logger.info(f"Loaded {data.N} observations from {cfg.data_path}")
    return data


def perturb_spec(cfg: RunConfig, m: PompModel) -> PerturbSpec:
    if isinstance(cfg.sigma, dict):
        sigmas = [cfg.sigma.get(n, 0.0) for n in m.param_names]
    elif isinstance(cfg.sigma, tuple):
        if len(cfg.sigma) != m.p:
            raise ValueError(f"mif.sigma has {len(cfg.sigma)} entries for {m.p} free parameters")
        sigmas = list(cfg.sigma)
    else:
        sigmas = [cfg.sigma] * m.p
    return PerturbSpec(np.array(sigmas), cfg.cooling_c, cfg.init_multiplier_C, m.ivp_mask)


def mif_config(cfg: RunConfig, m: PompModel) -> MifConfig:
    return MifConfig(J=cfg.J, M=cfg.M, perturb=perturb_spec(cfg, m), policy=cfg.policy, delta=cfg.delta,
                     L_est=cfg.L_est, lipschitz_pairs=cfg.lipschitz_pairs, lipschitz_radius=cfg.lipschitz_radius,
                     score_mode=cfg.score_mode, center=cfg.center, ck_form=cfg.ck_form, ivp_lag=cfg.ivp_lag,
                     if1_gamma1=cfg.if1_gamma1, seed=cfg.seed, J_eval=cfg.J_eval, K_eval=cfg.K_eval)


def cmd_simulate(cfg: RunConfig) -> Path:
    _, spec = build_model(cfg)
    data, meta = simulate_data(cfg, spec)
    out = cfg.output_dir
    if data.covariates is not None:
        data.covariates.to_csv(out / "covariates.csv")
        meta["covariates"] = "covariates.csv"
    else:
        meta["covariates"] = None
    path = data.to_csv(out / "data.csv", {"model": cfg.model_id, "seed": cfg.sim_seed})
    with open(out / "data.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(meta, f, indent=4, sort_keys=True)
        f.write("\n")
    print(f"Simulated {data.N} observations -> {path}")
    return path


def cmd_filter(cfg: RunConfig) -> Path:
    m, spec = build_model(cfg)
    data = load_data(cfg, spec)
    theta = m.defaults
    out = cfg.output_dir
    if "kalman" in cfg.methods:
        k = kalman_loglik(spec, data)
        df = pd.DataFrame({"n": np.arange(1, data.N + 1), "cond_loglik": k.cond_logliks})
        for i in range(spec.d):
            df[f"filt_mean_{i + 1}"] = k.filt_means[:, i]
        path = write_table(df, out / "kalman.csv", KALMAN_SCHEMA, {"loglik": repr(k.loglik)})
        print(f"Kalman loglik: {k.loglik:.4f}")
    else:
        f = bootstrap_filter(m, m.to_estimation(theta), data, cfg.J, RngStream(cfg.seed))
        path = f.to_csv(out / "filter.csv")
        print(f"Particle filter loglik (J={cfg.J}): {f.loglik:.4f}, min ESS {np.min(f.ess_trace):.1f}")
    return path


def reference_meta(cfg: RunConfig, spec, data: TimeSeriesData) -> Dict[str, object]:
    """Kalman maximum for the linear-Gaussian model; empty otherwise."""
    if cfg.model_id != "linear_gaussian" or not cfg.reference:
        return {}
    mle = kalman_mle(spec, data, cfg.free, cfg.start_lower, cfg.start_upper, seed=cfg.seed)
    return {"reference_loglik": repr(mle.loglik), "mle": [repr(float(v)) for v in mle.theta]}


def cmd_estimate(cfg: RunConfig, progress: bool = True) -> int:
    methods = cfg.estimation_methods
    if not methods:
        raise ValueError(f"estimate needs at least one of aif, if1, if2; got {cfg.methods}")
    m, spec = build_model(cfg)
    data = load_data(cfg, spec)
    mif = mif_config(cfg, m)
    meta = reference_meta(cfg, spec, data)
    out = cfg.output_dir

    results: List[ExperimentResult] = []
    for method in methods:
        result = replicate_search(method, m, data, (cfg.start_lower, cfg.start_upper), cfg.replications, mif,
                                  cfg.seed, workers=cfg.workers, progress=progress)
        result.to_csv(out / f"results_{method}.csv", meta)
        for r, trace in enumerate(result.traces):
            if trace is not None:
                trace.to_csv(out / "traces" / f"{method}_rep{r:03d}.csv")
        results.append(result)

    frame = pd.concat([r.to_frame() for r in results], ignore_index=True)
    write_table(frame, out / "results.csv", RESULT_SCHEMA, dict(meta, names=list(m.param_names)))
    failed = sum(r.n_failed for r in results)
    print(f"Done. {len(frame) - failed}/{len(frame)} runs completed; results in {out}")
    return EXIT_OK if failed == 0 else EXIT_PARTIAL


def cmd_benchmark(cfg: RunConfig, progress: bool = True) -> Path:
    """Mean wall time per method and J, from the default parameters; the Lipschitz estimate is not timed."""
    m, spec = build_model(cfg)
    data = load_data(cfg, spec)
    theta0 = m.defaults
    rows = []
    for J in cfg.bench_J:
        mif = replace(mif_config(cfg, m), J=J)
        if mif.L_est is None:
            est = m.transform.forward(np.asarray(theta0.values))
            L_est = estimate_score_lipschitz(m, data, mif, est - mif.lipschitz_radius, est + mif.lipschitz_radius,
                                             RngStream(cfg.seed, LIPSCHITZ_STREAM))
            mif = replace(mif, L_est=L_est)
        for method in cfg.bench_methods:
            times = []
            for r in tqdm(range(cfg.bench_runs), desc=f"{method} J={J}", disable=not progress):
                started = time.perf_counter()
                RUNNERS[method](m, data, theta0, mif, RngStream(cfg.seed, RUN_STREAM, (r,)))
                times.append(time.perf_counter() - started)
            rows.append({"J": J, "method": method, "runs": cfg.bench_runs,
                         "mean_seconds": float(np.mean(times)), "sd_seconds": float(np.std(times))})

    df = pd.DataFrame(rows)
    base = df[df["method"] == "if2"].set_index("J")["mean_seconds"]
    df["ratio_to_if2"] = [row.mean_seconds / base[row.J] if row.J in base.index else np.nan
                          for row in df.itertuples()]
    path = write_table(df, cfg.output_dir / "benchmark.csv", BENCHMARK_SCHEMA)
    print(df.to_string(index=False))
    return path


def _meta_vector(meta: Dict[str, str], key: str) -> Optional[np.ndarray]:
    if not meta.get(key):
        return None
    return np.array([float(v) for v in meta[key].split(",")])


def summarize_results(paths: Sequence[Path], threshold: float) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Per-method loglik quantiles, success fraction and distance to the reference MLE."""
    frames, reference, mle = [], None, None
    for path in paths:
        df, meta = read_table(path, RESULT_SCHEMA, required_columns=("method", "loglik", "status"))
        frames.append(df)
        if "reference_loglik" in meta:
            ref = float(meta["reference_loglik"])
            if reference is not None and ref != reference:
                logger.warning(f"{path}: reference loglik {ref} differs from {reference}; keeping the first")
            reference = ref if reference is None else reference
            mle = _meta_vector(meta, "mle") if mle is None else mle
    if not frames:
        raise ValueError("No result files to summarize")
    results = pd.concat(frames, ignore_index=True)

    rows = []
    for method, group in results.groupby("method", sort=True):
        ok = group[group["status"] == "ok"]
        ll = ok["loglik"].to_numpy(dtype=float)
        row = {"method": method, "runs": len(group), "completed": len(ok),
               "median": np.median(ll) if len(ll) else np.nan,
               "q25": np.quantile(ll, 0.25) if len(ll) else np.nan,
               "q75": np.quantile(ll, 0.75) if len(ll) else np.nan,
               "max": np.max(ll) if len(ll) else np.nan}
        if reference is not None:
            row["success_fraction"] = float(np.mean(ll >= reference - threshold)) if len(ll) else 0.0
        if mle is not None:
            final_cols = [f"final_{i + 1}" for i in range(len(mle))]
            missing = [c for c in final_cols if c not in ok.columns]
            if missing:
                raise SchemaError(f"Result table lacks column '{missing[0]}' needed for the distance to the MLE")
            dist = np.linalg.norm(ok[final_cols].to_numpy(dtype=float) - mle, axis=1)
            row["mean_distance_to_mle"] = float(np.mean(dist)) if len(dist) else np.nan
        rows.append(row)

    summary = pd.DataFrame(rows)
    done = results[results["status"] == "ok"]
    density = done[["method", "loglik"]].reset_index(drop=True)
    return summary, density


def cmd_summarize(cfg: RunConfig, files: Sequence[str]) -> Path:
    paths = [Path(f) for f in files] or [cfg.output_dir / "results.csv"]
    summary, density = summarize_results(paths, cfg.threshold)
    out = cfg.output_dir
    write_table(density, out / "density.csv", DENSITY_SCHEMA)
    path = write_table(summary, out / "summary.csv", SUMMARY_SCHEMA, {"threshold": cfg.threshold})
    print(summary.to_string(index=False))
    return path


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="Run configuration (JSON)")
    common.add_argument("--seed", type=int, help="Master seed (overrides the config)")
    common.add_argument("--workers", "-w", type=int, help="Concurrent replications")
    common.add_argument("--out", "-o", help="Output directory")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    common.add_argument("--no-progress", action="store_true", help="Hide progress bars")

    parser = argparse.ArgumentParser(description="AIFKit: accelerated iterated filtering for POMP models")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="Simulate a dataset")
    sub.add_parser("filter", parents=[common], help="Particle or Kalman filter at the configured parameters")
    sub.add_parser("estimate", parents=[common], help="Run estimation methods with replication")
    sub.add_parser("benchmark", parents=[common], help="Time IF1, IF2 and AIF")
    summarize = sub.add_parser("summarize", parents=[common], help="Summarize result tables")
    summarize.add_argument("files", nargs="*", help="Result CSV files (default: <out>/results.csv)")
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    manager = ConfigManager(args.config)
    if args.seed is not None:
        manager.set("seed", args.seed)
    if args.workers is not None:
        manager.set("workers", args.workers)
    if args.out is not None:
        manager.set("output_dir", args.out)
    return manager.run_config()


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s - %(levelname)s - %(message)s')
    progress = not args.no_progress
    try:
        cfg = load_run_config(args)
        if args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "filter":
            cmd_filter(cfg)
        elif args.command == "estimate":
            return cmd_estimate(cfg, progress)
        elif args.command == "benchmark":
            cmd_benchmark(cfg, progress)
        elif args.command == "summarize":
            cmd_summarize(cfg, args.files)
    except (ValueError, FileNotFoundError, KeyError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
