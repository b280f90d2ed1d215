"""Procedural-noise-correcting (PNC) predictor and the deep-ensemble baseline.

A trained wide network equals the idealized infinite ensemble plus a
procedural-noise term that depends only on the inputs and the initialization.
The auxiliary network trains on the artificial labels ``s_mean(X)`` from the
same initialization as the base network, so it reproduces that noise term
plus ``s_mean``; subtracting it leaves the ensemble limit after two trainings.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Dataset
from .network import NetConfig, TrainConfig, TrainingDiverged, WideNet, _forward_cache, forward, init_he, train_gd
from .rng import RngStream


class MeanInitMode(str, enum.Enum):
    ZERO = "zero"
    MONTE_CARLO = "monte_carlo"


@dataclass(frozen=True)
class MeanInitSpec:
    """How to evaluate the mean initial function ``s_mean``.

    He initialization is symmetric, so ``s_mean`` is identically zero and
    ``ZERO`` is exact.  ``MONTE_CARLO`` averages ``mc_count`` fresh networks;
    ``mc_count=None`` means ``100 * n`` for the dataset at hand.
    """

    mode: MeanInitMode = MeanInitMode.ZERO
    mc_count: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", MeanInitMode(self.mode))
        if self.mc_count is not None and self.mc_count < 1:
            raise ValueError("mc_count must be at least 1")

    def resolved_count(self, n: int) -> int:
        return self.mc_count if self.mc_count is not None else 100 * n

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "mc_count": self.mc_count}


MC_CHUNK = 64


class MeanInitFunction:
    """``s_mean`` as a deterministic function of a matrix of input rows.

    Monte Carlo draws are regenerated from the same stream on every call, so
    repeated evaluations (at different inputs) average over the same nets.
    """

    def __init__(self, spec: MeanInitSpec, config: NetConfig, rng: RngStream, n_ref: int = 1):
        self.spec = spec
        self.config = config
        self.rng = rng
        self.count = spec.resolved_count(n_ref) if spec.mode is MeanInitMode.MONTE_CARLO else 0

    def __call__(self, xs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        if xs.shape[1] != self.config.input_dim:
            raise ValueError("dimension mismatch")
        if self.spec.mode is MeanInitMode.ZERO:
            return np.zeros(xs.shape[0])
        gen = self.rng.generator()
        template = WideNet(self.config, np.zeros(self.config.n_params), np.zeros(self.config.n_params))
        total = np.zeros(xs.shape[0])
        left = self.count
        while left:
            k = min(left, MC_CHUNK)
            block = gen.standard_normal((k, self.config.n_params))
            for theta in block:
                total += _forward_cache(template.weights(theta), xs, self.config.width)[0]
            left -= k
        return total / self.count


def mean_init_evaluate(spec: MeanInitSpec, config: NetConfig, x, rng: RngStream, n_ref: int = 1) -> float:
    return float(MeanInitFunction(spec, config, rng, n_ref)(np.asarray(x, dtype=np.float64)[None])[0])


@dataclass(frozen=True, eq=False)
class PncPredictor:
    base: WideNet
    auxiliary: WideNet
    mean_init: MeanInitSpec
    train_cfg: TrainConfig
    s_mean: Callable = None

    def __post_init__(self):
        if not np.array_equal(self.base.init_params, self.auxiliary.init_params):
            raise ValueError("base and auxiliary networks must share one initialization")

    def __call__(self, x):
        return pnc_predict(self, x)


def fit_pnc(data: Dataset, net_cfg: NetConfig, train_cfg: TrainConfig, mean_init: MeanInitSpec,
            rng: RngStream) -> PncPredictor:
    """Train the base net on ``y`` and the auxiliary net on ``s_mean(X)`` from one init.

    Streams: ``rng.child(0)`` draws the shared init, ``rng.child(1)`` the Monte
    Carlo nets behind ``s_mean``.
    """
    start = init_he(net_cfg, rng.child(0))
    s_mean = MeanInitFunction(mean_init, net_cfg, rng.child(1), data.n)
    base = train_gd(start, data, train_cfg, role="base")
    aux = train_gd(start, data.with_responses(s_mean(data.inputs)), train_cfg, role="auxiliary")
    return PncPredictor(base, aux, mean_init, train_cfg, s_mean)


def pnc_predict(p: PncPredictor, x):
    """``base(x) - (auxiliary(x) - s_mean(x))``; a float for a vector, an array for rows."""
    x = np.asarray(x, dtype=np.float64)
    xs = x[None] if x.ndim == 1 else x
    out = forward(p.base, xs) - forward(p.auxiliary, xs) + p.s_mean(xs)
    return float(out[0]) if x.ndim == 1 else out


class MemberDiverged(TrainingDiverged):
    def __init__(self, member: int, cause: TrainingDiverged):
        super().__init__(cause.epoch, cause.loss_trace, f"ensemble member {member}")
        self.member = member


@dataclass(frozen=True, eq=False)
class DeepEnsemble:
    members: tuple[WideNet, ...]

    def __call__(self, x):
        preds = [forward(m, x) for m in self.members]
        out = sum(preds) / len(preds)
        return float(out) if np.ndim(out) == 0 else out


def deep_ensemble(data: Dataset, net_cfg: NetConfig, train_cfg: TrainConfig, m: int, rng: RngStream,
                  members: tuple[WideNet, ...] = ()) -> DeepEnsemble:
    """Average of ``m`` independently initialized base networks; member ``i`` uses ``rng.child(i)``.

    Already-trained ``members`` (e.g. a single net trained earlier with stream
    ``rng.child(0)``) are reused as the leading members.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    nets = list(members[:m])
    for i in range(len(nets), m):
        try:
            nets.append(train_gd(init_he(net_cfg, rng.child(i)), data, train_cfg, role=f"member {i}"))
        except TrainingDiverged as exc:
            raise MemberDiverged(i, exc) from exc
    return DeepEnsemble(tuple(nets))
