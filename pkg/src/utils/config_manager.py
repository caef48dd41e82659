import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

logger = logging.getLogger(__name__)

MODELS = ("linear_gaussian", "malaria")
METHODS = ("aif", "if1", "if2", "pf-only", "kalman")
ESTIMATION_METHODS = ("aif", "if1", "if2")


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


@dataclass(frozen=True)
class RunConfig:
    """Validated view of a run configuration."""
    model_id: str
    model_params: Dict[str, float]
    free: Tuple[str, ...]
    data_path: Optional[Path]
    covariates_path: Optional[Path]
    sim_N: int
    sim_seed: int
    sim_params: Dict[str, float]
    methods: Tuple[str, ...]
    J: int
    M: int
    sigma: Union[float, Dict[str, float], Tuple[float, ...]]
    cooling_c: float
    init_multiplier_C: float
    policy: str
    delta: float
    L_est: Optional[float]
    lipschitz_pairs: int
    lipschitz_radius: float
    score_mode: str
    center: str
    ck_form: str
    ivp_lag: Optional[int]
    if1_gamma1: Optional[float]
    replications: int
    start_lower: Tuple[float, ...]
    start_upper: Tuple[float, ...]
    seed: int
    workers: int
    output_dir: Path
    J_eval: Optional[int]
    K_eval: int
    reference: bool
    bench_J: Tuple[int, ...]
    bench_runs: int
    bench_methods: Tuple[str, ...]
    threshold: float

    @property
    def estimation_methods(self) -> Tuple[str, ...]:
        return tuple(m for m in self.methods if m in ESTIMATION_METHODS)


class ConfigManager:
    """
    Manages run configuration (defaults, loading, saving, validation).
    Files are JSON; values missing from a file keep their defaults.
    """
    DEFAULT_CONFIG = {
        "schema": "aifkit.config/1",
        "model": {
            "id": "linear_gaussian",
            "params": {},
            "free": ["alpha_2", "alpha_3"],
        },
        "data": {
            "path": None,
            "covariates_path": None,
            "simulate": {"N": 100, "seed": 42, "params": {}},
        },
        "method": ["aif"],
        "mif": {
            "J": 1000,
            "M": 25,
            "sigma": 0.02,
            "sigma_end": 0.011,
            "cooling_c": None,
            "C": 1.0,
            "policy": "convex",
            "delta": 1.0,
            "L_est": None,
            "lipschitz_pairs": 20,
            "lipschitz_radius": 0.1,
            "score_mode": "sum",
            "center": "md_current",
            "ck_form": "proof",
            "ivp_lag": None,
            "if1_gamma1": None,
        },
        "replications": 20,
        "start_box": {"lower": [-1.0, -1.0], "upper": [1.0, 1.0]},
        "seed": 1,
        "workers": 1,
        "output_dir": "results",
        "eval": {"J": None, "K": 10, "reference": True},
        "benchmark": {"J_values": [100, 1000], "runs": 5, "methods": ["if1", "if2", "aif"]},
        "summarize": {"threshold": 3.0},
    }

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.config_path = Path(path) if path else None
        self.config = copy.deepcopy(self.DEFAULT_CONFIG)
        if self.config_path is not None:
            self.load(self.config_path)

    def load(self, path: Union[str, Path]) -> None:
        """Load a JSON file and merge it over the current values."""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                loaded = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"Invalid JSON in config {path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ValueError(f"Config {path} must hold a JSON object")
        self.config = _deep_merge(self.config, loaded)
        self.config_path = path
        logger.info(f"Loaded config {path}")

    def save(self, path: Optional[Union[str, Path]] = None) -> Path:
        """Save configuration to file."""
        path = Path(path) if path else self.config_path
        if path is None:
            raise ValueError("No config path to save to")
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.config, f, indent=4)
        return path

    def get(self, key: str, default: Any = None) -> Any:
        """Get a config value by dotted key, e.g. 'mif.J'."""
        node = self.config
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def set(self, key: str, value: Any) -> None:
        """Set a config value by dotted key."""
        parts = key.split(".")
        node = self.config
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value

    def get_all(self) -> Dict[str, Any]:
        """Get entire config dict."""
        return self.config

    def _path(self, key: str) -> Optional[Path]:
        value = self.get(key)
        if value is None:
            return None
        path = Path(value)
        if not path.is_absolute() and self.config_path is not None and not path.exists():
            path = self.config_path.parent / path
        if not path.exists():
            raise FileNotFoundError(f"{key}: file not found: {value}")
        return path

    def cooling_c(self) -> float:
        c = self.get("mif.cooling_c")
        if c is not None:
            return float(c)
        sigma, sigma_end, M = self.get("mif.sigma"), self.get("mif.sigma_end"), int(self.get("mif.M"))
        if sigma_end is None or M < 2:
            return 0.95
        start = sigma if isinstance(sigma, (int, float)) else max(
            sigma.values() if isinstance(sigma, dict) else sigma)
        if not 0 < sigma_end < start:
            raise ValueError(f"mif.sigma_end={sigma_end} must lie strictly between 0 and the starting sigma {start}")
        return float((sigma_end / start) ** (1.0 / (M - 1)))

    def run_config(self) -> RunConfig:
        """Validate the configuration and return a RunConfig."""
        model_id = self.get("model.id")
        if model_id not in MODELS:
            raise ValueError(f"model.id must be one of {MODELS}, got {model_id!r}")
        methods = self.get("method")
        methods = (methods,) if isinstance(methods, str) else tuple(methods)
        unknown = [m for m in methods if m not in METHODS]
        if unknown or not methods:
            raise ValueError(f"Unknown method(s) {unknown}; expected any of {METHODS}")
        if "kalman" in methods and model_id != "linear_gaussian":
            raise ValueError("Method 'kalman' is only available for the linear_gaussian model")

        sigma = self.get("mif.sigma")
        if isinstance(sigma, list):
            sigma = tuple(float(s) for s in sigma)
        elif isinstance(sigma, dict):
            sigma = {k: float(v) for k, v in sigma.items()}
        else:
            sigma = float(sigma)
        lower = tuple(float(v) for v in self.get("start_box.lower"))
        upper = tuple(float(v) for v in self.get("start_box.upper"))
        free = tuple(self.get("model.free"))
        if len(lower) != len(free) or len(upper) != len(free):
            raise ValueError(f"start_box needs {len(free)} bounds per side for free parameters {free}")

        def optional(key, kind):
            value = self.get(key)
            return None if value is None else kind(value)

        cfg = RunConfig(
            model_id=model_id,
            model_params=dict(self.get("model.params") or {}),
            free=free,
            data_path=self._path("data.path"),
            covariates_path=self._path("data.covariates_path"),
            sim_N=int(self.get("data.simulate.N")),
            sim_seed=int(self.get("data.simulate.seed")),
            sim_params=dict(self.get("data.simulate.params") or {}),
            methods=methods,
            J=int(self.get("mif.J")),
            M=int(self.get("mif.M")),
            sigma=sigma,
            cooling_c=self.cooling_c(),
            init_multiplier_C=float(self.get("mif.C")),
            policy=self.get("mif.policy"),
            delta=float(self.get("mif.delta")),
            L_est=optional("mif.L_est", float),
            lipschitz_pairs=int(self.get("mif.lipschitz_pairs")),
            lipschitz_radius=float(self.get("mif.lipschitz_radius")),
            score_mode=self.get("mif.score_mode"),
            center=self.get("mif.center"),
            ck_form=self.get("mif.ck_form"),
            ivp_lag=optional("mif.ivp_lag", int),
            if1_gamma1=optional("mif.if1_gamma1", float),
            replications=int(self.get("replications")),
            start_lower=lower,
            start_upper=upper,
            seed=int(self.get("seed")),
            workers=int(self.get("workers")),
            output_dir=Path(self.get("output_dir")),
            J_eval=optional("eval.J", int),
            K_eval=int(self.get("eval.K")),
            reference=bool(self.get("eval.reference")),
            bench_J=tuple(int(j) for j in self.get("benchmark.J_values")),
            bench_runs=int(self.get("benchmark.runs")),
            bench_methods=tuple(self.get("benchmark.methods")),
            threshold=float(self.get("summarize.threshold")),
        )
        if cfg.replications < 1:
            raise ValueError(f"replications must be >= 1, got {cfg.replications}")
        if cfg.workers < 1:
            raise ValueError(f"workers must be >= 1, got {cfg.workers}")
        if cfg.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {cfg.seed}")
        bad = [m for m in cfg.bench_methods if m not in ESTIMATION_METHODS]
        if bad:
            raise ValueError(f"benchmark.methods may only name {ESTIMATION_METHODS}, got {bad}")
        return cfg
