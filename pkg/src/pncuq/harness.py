"""Experiment orchestration: coverage studies, MSE benchmarks and reports.

Every repetition ``j`` draws from ``RngStream(master_seed, stream_id=j)``;
inside a repetition role ``0`` generates the data and role ``1`` drives the
interval construction, so results do not depend on worker count or order.
"""

from __future__ import annotations

import csv
import io
import json
import math
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .data import Dataset, SyntheticSpec, generate_synthetic, ground_truth, load_csv, simulate_real
from .inference import (
    ConfidenceInterval, Method, PncPipeline, batch_predictions, batching_interval,
    bootstrap_predictions, cheap_bootstrap_interval, ij_interval, ij_solution, ij_variance,
)
from .network import NetConfig, TrainConfig, TrainingDiverged, forward, init_he, train_gd
from .ntk import Mode
from .pnc import DeepEnsemble, MeanInitFunction, MeanInitSpec, PncPredictor
from .rng import RngStream
from .stats import clopper_pearson


class ConfigError(ValueError):
    pass


# Learning rates per input dimension.  The top eigenvalue of K/n for inputs
# uniform on [0, 0.2]^d is about 0.022 d (0.029-0.055 at d=2 over n in
# [32, 128]); GD on the mean squared loss is stable for eta < n / lambda_max(K),
# and these values keep eta * lambda_max(K) / n at or below about 0.7.
PRESET_LEARNING_RATE = {2: 12.0, 4: 6.0, 8: 3.0, 16: 1.5}
PRESET_EPOCHS = 500
DEFAULT_RIDGE = 1e-10


def preset_learning_rate(d: int) -> float:
    return PRESET_LEARNING_RATE.get(d, 24.0 / d)


CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "data": {
            "type": "object",
            "oneOf": [
                {
                    "additionalProperties": False,
                    "required": ["synthetic"],
                    "properties": {"synthetic": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["family", "dim"],
                        "properties": {
                            "family": {"enum": ["SinSum", "XSinX"]},
                            "dim": {"type": "integer", "minimum": 1},
                            "noise_sd": {"type": "number", "minimum": 0},
                            "box_high": {"type": "number", "exclusiveMinimum": 0},
                        },
                    }},
                },
                {
                    "additionalProperties": False,
                    "required": ["csv", "noise_sd", "y0"],
                    "properties": {
                        "csv": {"type": "string"},
                        "noise_sd": {"type": "number", "exclusiveMinimum": 0},
                        "y0": {"type": "number"},
                    },
                },
            ],
        },
        "n": {"type": "integer", "minimum": 1},
        "network": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "width_factor": {"type": "integer", "minimum": 1},
                "depth": {"type": "integer", "minimum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "epochs": {"type": "integer", "minimum": 0},
                "ridge": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "mean_init": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["zero", "monte_carlo"]},
                "mc_count": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "method": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"enum": ["batching", "cheap_bootstrap", "ij"]},
                "m_prime": {"type": "integer", "minimum": 2},
                "R": {"type": "integer", "minimum": 1},
                "kernel": {"enum": ["analytic", "empirical"]},
            },
        },
        "levels": {"type": "array", "minItems": 1,
                   "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
        "repetitions": {"type": "integer", "minimum": 1},
        "x0": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "master_seed": {"type": "integer", "minimum": 0},
        "workers": {"type": "integer", "minimum": 1},
        "mse": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seeds": {"type": "integer", "minimum": 1},
                "test_size": {"type": "integer", "minimum": 1},
                "ensemble_sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}},
            },
        },
    },
}


@dataclass(frozen=True)
class CsvSource:
    path: str
    noise_sd: float
    y0: float


@dataclass(frozen=True)
class MethodConfig:
    name: str = "batching"
    m_prime: int = 4
    R: int = 4
    kernel: str = "analytic"

    @property
    def method(self) -> Method:
        return {"batching": Method.BATCHING, "cheap_bootstrap": Method.CHEAP_BOOTSTRAP,
                "ij": Method.IJ}[self.name]


@dataclass(frozen=True)
class MseConfig:
    seeds: int = 10
    test_size: int = 2048
    ensemble_sizes: tuple[int, ...] = (2, 5)


@dataclass(frozen=True)
class ExperimentConfig:
    data: SyntheticSpec | CsvSource = field(default_factory=SyntheticSpec)
    n: int = 128
    width_factor: int = 32
    depth: int = 1
    train: TrainConfig | None = None
    mean_init: MeanInitSpec = field(default_factory=MeanInitSpec)
    method: MethodConfig = field(default_factory=MethodConfig)
    levels: tuple[float, ...] = (0.95, 0.90)
    repetitions: int = 100
    x0: tuple[float, ...] | None = None
    master_seed: int = 0
    workers: int = 1
    mse: MseConfig = field(default_factory=MseConfig)

    def __post_init__(self):
        if self.train is None:
            object.__setattr__(self, "train", TrainConfig(preset_learning_rate(self.d), PRESET_EPOCHS,
                                                          DEFAULT_RIDGE))
        if self.x0 is None:
            object.__setattr__(self, "x0", (0.1,) * self.d)
        if len(self.x0) != self.d:
            raise ConfigError(f"x0 has {len(self.x0)} entries but the data have {self.d} features")
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))

    @property
    def d(self) -> int:
        if isinstance(self.data, SyntheticSpec):
            return self.data.dim
        return _csv_base(self.data.path).d

    @property
    def y0(self) -> float:
        if isinstance(self.data, SyntheticSpec):
            return ground_truth(self.data, np.array(self.x0))
        return self.data.y0

    def pipeline(self) -> PncPipeline:
        return PncPipeline(self.train, self.mean_init, self.width_factor, self.depth,
                           Mode(self.method.kernel))

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(raw, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"invalid config at {where}: {exc.message}") from None
        kw = {}
        data = raw.get("data", {"synthetic": {"family": "SinSum", "dim": 2}})
        if "synthetic" in data:
            kw["data"] = SyntheticSpec.from_dict(data["synthetic"])
        else:
            kw["data"] = CsvSource(data["csv"], data["noise_sd"], data["y0"])
        for key in ("n", "repetitions", "master_seed", "workers"):
            if key in raw:
                kw[key] = raw[key]
        if "x0" in raw:
            kw["x0"] = tuple(raw["x0"])
        if "levels" in raw:
            kw["levels"] = tuple(raw["levels"])
        net = raw.get("network", {})
        kw["width_factor"] = net.get("width_factor", 32)
        kw["depth"] = net.get("depth", 1)
        dim = kw["data"].dim if isinstance(kw["data"], SyntheticSpec) else _csv_base(kw["data"].path).d
        tr = raw.get("train", {})
        kw["train"] = TrainConfig(tr.get("learning_rate", preset_learning_rate(dim)),
                                  tr.get("epochs", PRESET_EPOCHS), tr.get("ridge", DEFAULT_RIDGE))
        if "mean_init" in raw:
            kw["mean_init"] = MeanInitSpec(**raw["mean_init"])
        if "method" in raw:
            kw["method"] = MethodConfig(**raw["method"])
        if "mse" in raw:
            m = dict(raw["mse"])
            if "ensemble_sizes" in m:
                m["ensemble_sizes"] = tuple(m["ensemble_sizes"])
            kw["mse"] = MseConfig(**m)
        if isinstance(kw["data"], CsvSource):
            base = _csv_base(kw["data"].path)
            if "n" in raw and raw["n"] != base.n:
                raise ConfigError(f"n={raw['n']} but {kw['data'].path} has {base.n} rows")
            kw["n"] = base.n
        return cls(**kw)

    def to_dict(self) -> dict:
        if isinstance(self.data, SyntheticSpec):
            data = {"synthetic": self.data.to_dict()}
        else:
            data = {"csv": self.data.path, "noise_sd": self.data.noise_sd, "y0": self.data.y0}
        return {
            "data": data,
            "n": self.n,
            "network": {"width_factor": self.width_factor, "depth": self.depth},
            "train": {"learning_rate": self.train.learning_rate, "epochs": self.train.epochs,
                      "ridge": self.train.ridge},
            "mean_init": self.mean_init.to_dict(),
            "method": {"name": self.method.name, "m_prime": self.method.m_prime, "R": self.method.R,
                       "kernel": self.method.kernel},
            "levels": list(self.levels),
            "repetitions": self.repetitions,
            "x0": list(self.x0),
            "master_seed": self.master_seed,
            "workers": self.workers,
            "mse": {"seeds": self.mse.seeds, "test_size": self.mse.test_size,
                    "ensemble_sizes": list(self.mse.ensemble_sizes)},
        }


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return ExperimentConfig.from_dict(raw)


_CSV_CACHE: dict[str, Dataset] = {}


def _csv_base(path: str) -> Dataset:
    if path not in _CSV_CACHE:
        try:
            _CSV_CACHE[path] = load_csv(path)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return _CSV_CACHE[path]


def build_id() -> str:
    """Package version plus the short commit hash of the source tree, when available."""
    try:
        out = subprocess.run(["git", "-C", str(Path(__file__).parent), "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=5)
        rev = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


def repetition_data(cfg: ExperimentConfig, rep: int) -> Dataset:
    stream = RngStream(cfg.master_seed, rep).child(0)
    if isinstance(cfg.data, SyntheticSpec):
        return generate_synthetic(cfg.data, cfg.n, stream)
    return simulate_real(_csv_base(cfg.data.path), cfg.data.noise_sd, stream)


# --- coverage -------------------------------------------------------------

class RepetitionFailed(RuntimeError):
    def __init__(self, rep: int, cause: Exception, partial: "CoverageReport | None" = None):
        super().__init__(f"repetition {rep} failed: {cause}")
        self.rep = rep
        self.cause = cause
        self.partial = partial


def run_repetition(cfg: ExperimentConfig, rep: int) -> tuple[list[ConfidenceInterval], float]:
    """All requested intervals for one repetition, plus its wall-clock seconds."""
    t0 = time.perf_counter()
    data = repetition_data(cfg, rep)
    stream = RngStream(cfg.master_seed, rep).child(1)
    pipe = cfg.pipeline()
    x0 = np.array(cfg.x0)
    m = cfg.method
    if m.method is Method.BATCHING:
        preds = batch_predictions(data, x0, m.m_prime, pipe, stream)
        cis = [batching_interval(preds, lv) for lv in cfg.levels]
    elif m.method is Method.CHEAP_BOOTSTRAP:
        psi, reps = bootstrap_predictions(data, x0, m.R, pipe, stream)
        cis = [cheap_bootstrap_interval(psi, reps, lv) for lv in cfg.levels]
    else:
        sol = ij_solution(data, pipe, stream)
        est = ij_variance(sol, x0)
        center = sol(x0)
        cis = [ij_interval(center, est, lv) for lv in cfg.levels]
    return cis, time.perf_counter() - t0


def _rep_worker(args):
    cfg, rep = args
    try:
        return rep, run_repetition(cfg, rep), None
    except (TrainingDiverged, ArithmeticError, np.linalg.LinAlgError) as exc:
        return rep, None, exc


@dataclass(frozen=True)
class LevelSummary:
    level: float
    coverage: float
    mean_width: float
    mean_midpoint: float
    cp_lower: float
    cp_upper: float
    hits: int
    repetitions: int

    def to_dict(self) -> dict:
        return {"level": self.level, "CR": self.coverage, "IW": self.mean_width, "MP": self.mean_midpoint,
                "CR_clopper_pearson": [self.cp_lower, self.cp_upper], "hits": self.hits,
                "repetitions": self.repetitions}


def summarize_level(intervals: list[ConfidenceInterval], target: float, level: float) -> LevelSummary:
    hits = int(sum(ci.contains(target) for ci in intervals))
    J = len(intervals)
    lo, hi = clopper_pearson(hits, J, 0.95)
    return LevelSummary(level, hits / J, float(np.mean([ci.width for ci in intervals])),
                        float(np.mean([ci.center for ci in intervals])), lo, hi, hits, J)


@dataclass(frozen=True, eq=False)
class CoverageReport:
    config: ExperimentConfig
    target: float
    intervals: tuple[tuple[ConfidenceInterval, ...], ...]
    seconds: tuple[float, ...]
    build: str = field(default_factory=build_id)

    @property
    def summaries(self) -> list[LevelSummary]:
        return [summarize_level([rep[i] for rep in self.intervals], self.target, lv)
                for i, lv in enumerate(self.config.levels)]

    def summary(self, level: float) -> LevelSummary:
        for s in self.summaries:
            if math.isclose(s.level, level):
                return s
        raise KeyError(level)

    def to_dict(self, with_timings: bool = False) -> dict:
        out = {
            "kind": "coverage",
            "build": self.build,
            "config": self.config.to_dict(),
            "target": self.target,
            "method": self.config.method.method.value,
            "summary": [s.to_dict() for s in self.summaries],
            "repetitions": [
                {"index": j, "intervals": [ci.to_dict() for ci in rep]}
                for j, rep in enumerate(self.intervals)
            ],
        }
        if with_timings:
            out["seconds"] = list(self.seconds)
        return out

    def to_json(self, with_timings: bool = False) -> str:
        d = self.to_dict(with_timings)
        validate_report(d)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def table_rows(self) -> list[dict]:
        row = {"method": self.config.method.method.value, "d": self.config.d, "n": self.config.n}
        for s in self.summaries:
            pct = f"{round(100 * s.level):d}"
            row[f"CR{pct}"] = f"{s.coverage:.2f}"
            row[f"IW{pct}"] = f"{s.mean_width:.4f}"
        row["MP"] = f"{self.summaries[0].mean_midpoint:.4f}"
        return [row]


def _map_repetitions(cfg: ExperimentConfig, reps, progress=None):
    jobs = [(cfg, j) for j in reps]
    if cfg.workers <= 1:
        for job in jobs:
            res = _rep_worker(job)
            if progress:
                progress(res[0])
            yield res
        return
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        for res in pool.map(_rep_worker, jobs):
            if progress:
                progress(res[0])
            yield res


def run_coverage(cfg: ExperimentConfig, progress=None) -> CoverageReport:
    """``J`` independent repetitions, one interval per level each, scored against ``y0``."""
    target = cfg.y0
    done, secs = [], []
    for rep, result, err in _map_repetitions(cfg, range(cfg.repetitions), progress):
        if err is not None:
            partial = CoverageReport(replace(cfg, repetitions=max(len(done), 1)), target,
                                     tuple(done), tuple(secs)) if done else None
            raise RepetitionFailed(rep, err, partial) from err
        done.append(tuple(result[0]))
        secs.append(result[1])
    return CoverageReport(cfg, target, tuple(done), tuple(secs))


# --- MSE benchmark --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MseReport:
    config: ExperimentConfig
    values: dict[str, tuple[float, ...]]
    seconds: dict[str, tuple[float, ...]]
    build: str = field(default_factory=build_id)

    def mean(self, method: str) -> float:
        return float(np.mean(self.values[method]))

    def sd(self, method: str) -> float:
        v = self.values[method]
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    def to_dict(self, with_timings: bool = False) -> dict:
        out = {
            "kind": "mse",
            "build": self.build,
            "config": self.config.to_dict(),
            "test_size": self.config.mse.test_size,
            "methods": {
                m: {"mean": self.mean(m), "sd": self.sd(m), "values": list(v)}
                for m, v in self.values.items()
            },
        }
        if with_timings:
            out["seconds"] = {m: list(v) for m, v in self.seconds.items()}
        return out

    def to_json(self, with_timings: bool = False) -> str:
        d = self.to_dict(with_timings)
        validate_report(d)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def table_rows(self) -> list[dict]:
        return [{"method": m, "d": self.config.d, "n": self.config.n,
                 "MSE_mean": f"{self.mean(m):.3e}", "MSE_sd": f"{self.sd(m):.3e}"} for m in self.values]


def mse_seed(cfg: ExperimentConfig, seed: int) -> tuple[dict[str, float], dict[str, float]]:
    """Test MSE and training seconds of every method for one seed.

    Member ``i`` of the ensembles starts from stream ``child(2).child(i)``, the
    convention of :func:`deep_ensemble`, so the single network, the PNC base
    network and ensemble member 0 are one trained network and every method
    adds only the networks it needs.  Monte Carlo draws for ``s_mean`` use
    ``child(3)`` so they never coincide with a member's initialization.
    """
    if not isinstance(cfg.data, SyntheticSpec):
        raise ConfigError("the MSE benchmark needs a synthetic data spec")
    stream = RngStream(cfg.master_seed, seed)
    train = generate_synthetic(cfg.data, cfg.n, stream.child(0))
    test = generate_synthetic(cfg.data, cfg.mse.test_size, stream.child(1))
    net_cfg = NetConfig.for_sample_size(cfg.d, cfg.n, cfg.width_factor, cfg.depth)
    fits = stream.child(2)

    def timed(fn):
        t0 = time.perf_counter()
        out = fn()
        return out, time.perf_counter() - t0

    nets, times = [], []
    for i in range(max((1,) + tuple(cfg.mse.ensemble_sizes))):
        net, dt = timed(lambda: train_gd(init_he(net_cfg, fits.child(i)), train, cfg.train, role=f"member {i}"))
        nets.append(net)
        times.append(dt)
    s_mean = MeanInitFunction(cfg.mean_init, net_cfg, stream.child(3), train.n)
    aux, t_aux = timed(lambda: train_gd(nets[0].at_init(), train.with_responses(s_mean(train.inputs)),
                                        cfg.train, role="auxiliary"))
    pnc = PncPredictor(nets[0], aux, cfg.mean_init, cfg.train, s_mean)

    mse = lambda pred: float(np.mean((pred - test.responses) ** 2))
    vals = {"single": mse(forward(nets[0], test.inputs)), "PNC": mse(pnc(test.inputs))}
    secs = {"single": times[0], "PNC": times[0] + t_aux}
    for m in sorted(cfg.mse.ensemble_sizes):
        vals[f"ensemble({m})"] = mse(DeepEnsemble(tuple(nets[:m]))(test.inputs))
        secs[f"ensemble({m})"] = sum(times[:m])
    return vals, secs


def run_mse(cfg: ExperimentConfig) -> MseReport:
    values: dict[str, list[float]] = {}
    seconds: dict[str, list[float]] = {}
    for s in range(cfg.mse.seeds):
        try:
            vals, secs = mse_seed(cfg, s)
        except TrainingDiverged as exc:
            raise RepetitionFailed(s, exc) from exc
        for k, v in vals.items():
            values.setdefault(k, []).append(v)
            seconds.setdefault(k, []).append(secs.get(k, math.nan))
    return MseReport(cfg, {k: tuple(v) for k, v in values.items()},
                     {k: tuple(v) for k, v in seconds.items()})


# --- reports --------------------------------------------------------------

_INTERVAL_SCHEMA = {
    "type": "object",
    "required": ["method", "level", "center", "half_width", "df", "scale", "replications"],
    "properties": {
        "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "half_width": {"type": "number", "minimum": 0},
        "df": {"anyOf": [{"type": "integer", "minimum": 1}, {"const": "inf"}]},
    },
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["kind", "build", "config"],
    "oneOf": [
        {
            "properties": {
                "kind": {"const": "coverage"},
                "summary": {"type": "array", "items": {
                    "type": "object",
                    "required": ["level", "CR", "IW", "MP", "CR_clopper_pearson"],
                    "properties": {
                        "CR": {"type": "number", "minimum": 0, "maximum": 1},
                        "IW": {"type": "number", "minimum": 0},
                        "CR_clopper_pearson": {"type": "array", "minItems": 2, "maxItems": 2,
                                               "items": {"type": "number", "minimum": 0, "maximum": 1}},
                    },
                }},
                "repetitions": {"type": "array", "items": {
                    "type": "object",
                    "required": ["index", "intervals"],
                    "properties": {"intervals": {"type": "array", "items": _INTERVAL_SCHEMA}},
                }},
            },
            "required": ["summary", "repetitions", "target"],
        },
        {
            "properties": {
                "kind": {"const": "mse"},
                "methods": {"type": "object", "additionalProperties": {
                    "type": "object", "required": ["mean", "sd", "values"],
                    "properties": {"mean": {"type": "number", "minimum": 0}},
                }},
            },
            "required": ["methods", "test_size"],
        },
    ],
}


def validate_report(d: dict) -> None:
    jsonschema.validate(d, REPORT_SCHEMA)
    if d["kind"] == "coverage":
        for s in d["summary"]:
            lo, hi = s["CR_clopper_pearson"]
            if not lo <= s["CR"] <= hi:
                raise jsonschema.ValidationError("Clopper-Pearson band does not contain CR")


def table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
