"""Confidence intervals for the procedural-noise-free predictor.

Three constructors share :class:`ConfidenceInterval`:

* batching: PNC on ``m'`` disjoint batches, ``t_{m'-1}`` pivot,
  ``psi_B +- q S_B / sqrt(m')``;
* cheap bootstrap: PNC on the data and on ``R`` resamples, ``t_R`` pivot,
  ``psi_C +- q S_C``.  There is no ``sqrt(R)`` divisor because ``S_C``
  already estimates the spread of a single estimator, not of an average;
* infinitesimal jackknife: the closed-form ensemble predictor with a plug-in
  variance from its influence function, ``h(x0) +- z sigma_hat / sqrt(n)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, bootstrap_resample, split_batches
from .krr import KrrSolution, ensemble_closed_form, solve
from .network import NetConfig, TrainConfig, TrainingDiverged, init_he
from .ntk import Mode, NtkKernel
from .pnc import MeanInitFunction, MeanInitMode, MeanInitSpec, PncPredictor, fit_pnc
from .rng import RngStream
from .stats import two_sided_quantile


class Method(str, enum.Enum):
    BATCHING = "Batching"
    CHEAP_BOOTSTRAP = "CheapBootstrap"
    IJ = "InfinitesimalJackknife"


@dataclass(frozen=True)
class ConfidenceInterval:
    center: float
    half_width: float
    level: float
    method: Method
    df: float
    scale: float
    replications: int

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")
        if self.half_width < 0:
            raise ValueError("half_width must be nonnegative")

    @property
    def lower(self) -> float:
        return self.center - self.half_width

    @property
    def upper(self) -> float:
        return self.center + self.half_width

    @property
    def width(self) -> float:
        return 2.0 * self.half_width

    def contains(self, value: float) -> bool:
        return bool(self.lower <= value <= self.upper)

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "level": self.level,
            "center": self.center,
            "half_width": self.half_width,
            "df": "inf" if math.isinf(self.df) else int(self.df),
            "scale": self.scale,
            "replications": self.replications,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConfidenceInterval":
        df = math.inf if d["df"] == "inf" else d["df"]
        return cls(d["center"], d["half_width"], d["level"], d["method"], df, d["scale"], d["replications"])


class BatchDiverged(TrainingDiverged):
    def __init__(self, unit: str, index: int, cause: TrainingDiverged):
        super().__init__(cause.epoch, cause.loss_trace, f"{unit} {index}, {cause.role}")
        self.index = index


@dataclass(frozen=True)
class PncPipeline:
    """Everything needed to fit one PNC predictor.

    The hidden width is ``width_factor * n_ref``, where ``n_ref`` is the size
    of the full training set even when the fit runs on a batch or resample.
    """

    train: TrainConfig
    mean_init: MeanInitSpec = field(default_factory=MeanInitSpec)
    width_factor: int = 32
    depth: int = 1
    kernel: Mode = Mode.ANALYTIC

    def __post_init__(self):
        object.__setattr__(self, "kernel", Mode(self.kernel))

    def net_config(self, d: int, n_ref: int) -> NetConfig:
        return NetConfig.for_sample_size(d, n_ref, self.width_factor, self.depth)

    def fit(self, data: Dataset, rng: RngStream, n_ref: int | None = None) -> PncPredictor:
        return fit_pnc(data, self.net_config(data.d, n_ref or data.n), self.train, self.mean_init, rng)


def _x0(x0, d):
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (d,):
        raise ValueError(f"x0 must have {d} entries")
    return x0


# --- batching -------------------------------------------------------------

def batch_predictions(data: Dataset, x0, m_prime: int, pipeline: PncPipeline, rng: RngStream) -> np.ndarray:
    """PNC prediction at ``x0`` from each of ``m'`` disjoint batches.

    Streams: ``rng.child(0)`` permutes the rows, ``rng.child(1, j)`` fits batch ``j``.
    """
    if m_prime < 2:
        raise ValueError("m_prime must be at least 2")
    if data.n < 2 * m_prime:
        raise ValueError(f"need at least {2 * m_prime} rows for {m_prime} batches of size >= 2")
    x0 = _x0(x0, data.d)
    preds = []
    for j, batch in enumerate(split_batches(data, m_prime, rng.child(0))):
        try:
            preds.append(pipeline.fit(batch, rng.child(1, j), n_ref=data.n)(x0))
        except TrainingDiverged as exc:
            raise BatchDiverged("batch", j, exc) from exc
    return np.array(preds)


def batching_interval(preds, level: float) -> ConfidenceInterval:
    preds = np.asarray(preds, dtype=np.float64)
    m = preds.shape[0]
    if m < 2:
        raise ValueError("need at least two batch estimates")
    psi = float(preds.mean())
    s = float(preds.std(ddof=1))
    q = two_sided_quantile(level, m - 1)
    return ConfidenceInterval(psi, q * s / math.sqrt(m), level, Method.BATCHING, m - 1, s, m)


def batching_ci(data: Dataset, x0, level: float, m_prime: int, pipeline: PncPipeline,
                rng: RngStream) -> ConfidenceInterval:
    return batching_interval(batch_predictions(data, x0, m_prime, pipeline, rng), level)


# --- cheap bootstrap ------------------------------------------------------

def bootstrap_predictions(data: Dataset, x0, R: int, pipeline: PncPipeline,
                          rng: RngStream) -> tuple[float, np.ndarray]:
    """``(psi_C, v*)``: the full-data PNC prediction and ``R`` resample predictions.

    Streams: ``rng.child(0)`` fits the full data, ``rng.child(1, j)`` draws
    resample ``j`` and ``rng.child(2, j)`` fits it.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    x0 = _x0(x0, data.d)
    try:
        psi = pipeline.fit(data, rng.child(0))(x0)
    except TrainingDiverged as exc:
        raise BatchDiverged("full-data fit", 0, exc) from exc
    reps = []
    for j in range(R):
        star = bootstrap_resample(data, rng.child(1, j))
        try:
            reps.append(pipeline.fit(star, rng.child(2, j), n_ref=data.n)(x0))
        except TrainingDiverged as exc:
            raise BatchDiverged("resample", j, exc) from exc
    return psi, np.array(reps)


def cheap_bootstrap_interval(psi: float, reps, level: float) -> ConfidenceInterval:
    reps = np.asarray(reps, dtype=np.float64)
    R = reps.shape[0]
    if R < 1:
        raise ValueError("need at least one resample estimate")
    s = math.sqrt(float(np.mean((reps - psi) ** 2)))
    q = two_sided_quantile(level, R)
    return ConfidenceInterval(float(psi), q * s, level, Method.CHEAP_BOOTSTRAP, R, s, R)


def cheap_bootstrap_ci(data: Dataset, x0, level: float, R: int, pipeline: PncPipeline,
                       rng: RngStream) -> ConfidenceInterval:
    psi, reps = bootstrap_predictions(data, x0, R, pipeline, rng)
    return cheap_bootstrap_interval(psi, reps, level)


# --- infinitesimal jackknife ----------------------------------------------

@dataclass(frozen=True, eq=False)
class IjEstimate:
    sigma_hat_sq: float
    per_point_if: np.ndarray

    @property
    def sigma_hat(self) -> float:
        return math.sqrt(self.sigma_hat_sq)


def _at_ridge(sol: KrrSolution, lam0):
    if lam0 is None or lam0 == sol.ridge:
        return sol
    return solve(sol.kernel, Dataset(sol.train_inputs, sol.responses), lam0, sol.shift)


def ij_influence(sol: KrrSolution, z, x0, lam0: float | None = None) -> float:
    """Influence of the point mass at ``z = (z_x, z_y)`` on the ensemble predictor at ``x0``.

    With ``g = h* - s_mean`` and ``M(x) = g(x) - (z_y - h*(z_x)) k(z_x, x) / lam0``,
    the influence is ``K(x0, X) (K + lam0 n I)^{-1} M(X) - M(x0)``.
    ``lam0`` defaults to the solution's own ridge.
    """
    sol = _at_ridge(sol, lam0)
    lam = sol.ridge
    z_x, z_y = z
    X = sol.train_inputs
    x0 = _x0(x0, X.shape[1])
    z_x = _x0(z_x, X.shape[1])
    k = sol.kernel
    kx0 = k.matrix(x0[None], X)[0]
    kz = k.matrix(z_x[None], X)[0]
    r_z = float(z_y) - sol(z_x)
    g_X = k.matrix(X) @ sol.dual_coef
    g_x0 = kx0 @ sol.dual_coef
    m_X = g_X - (r_z / lam) * kz
    m_x0 = g_x0 - (r_z / lam) * float(k.matrix(z_x[None], x0[None])[0, 0])
    return float(kx0 @ sol.solve_gram(m_X) - m_x0)


def ij_variance(sol: KrrSolution, x0, lam0: float | None = None) -> IjEstimate:
    """Mean squared influence over the training points.

    At a training point the influence simplifies to ``n r_j w_j - w.r`` with
    residuals ``r = lam0 n alpha`` and weights ``w = (K + lam0 n I)^{-1} K(X, x0)``,
    which avoids dividing by a tiny ridge.
    """
    sol = _at_ridge(sol, lam0)
    X = sol.train_inputs
    n = X.shape[0]
    x0 = _x0(x0, X.shape[1])
    w = sol.solve_gram(sol.kernel.matrix(X, x0[None])[:, 0])
    r = sol.ridge * n * sol.dual_coef
    infl = n * r * w - w @ r
    infl.setflags(write=False)
    return IjEstimate(float(np.mean(infl ** 2)), infl)


def ij_solution(data: Dataset, pipeline: PncPipeline, rng: RngStream | None = None) -> KrrSolution:
    """The closed-form ensemble predictor the IJ interval is built on."""
    rng = rng or RngStream(0)
    if pipeline.kernel is Mode.ANALYTIC:
        kernel = NtkKernel.analytic(pipeline.depth)
    else:
        kernel = NtkKernel.empirical(init_he(pipeline.net_config(data.d, data.n), rng.child(0)))
    shift = None
    if pipeline.mean_init.mode is MeanInitMode.MONTE_CARLO:
        shift = MeanInitFunction(pipeline.mean_init, pipeline.net_config(data.d, data.n), rng.child(1), data.n)
    return ensemble_closed_form(kernel, data, pipeline.train.ridge, shift)


def ij_interval(center: float, est: IjEstimate, level: float) -> ConfidenceInterval:
    n = est.per_point_if.shape[0]
    q = two_sided_quantile(level, math.inf)
    return ConfidenceInterval(center, q * est.sigma_hat / math.sqrt(n), level, Method.IJ,
                              math.inf, est.sigma_hat, n)


def ij_ci(data: Dataset, x0, level: float, pipeline: PncPipeline,
          rng: RngStream | None = None) -> ConfidenceInterval:
    sol = ij_solution(data, pipeline, rng)
    x0 = _x0(x0, data.d)
    return ij_interval(sol(x0), ij_variance(sol, x0), level)
