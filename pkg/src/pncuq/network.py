"""Bias-free ReLU MLP under NTK parameterization, trained by full-batch GD.

Layer ``l`` computes ``f_l = W_l g_{l-1}`` and ``g_l = sqrt(2 / width) relu(f_l)``
with ``g_0 = x``; the output is ``W_{L+1} g_L``.  All weights are i.i.d.
standard normal at initialization, so the width scaling lives in the forward
pass rather than in the weights.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset
from .rng import RngStream

C_RELU = 2.0

# Training aborts once the loss exceeds this multiple of its natural scale
# (the larger of the initial loss and the mean squared label).  With ReLU a
# huge step can kill every unit, leaving a finite but absurd plateau that a
# non-finite check alone never catches.
BLOWUP_FACTOR = 1e6
BLOCK_ELEMENTS = 2 ** 16


class TrainingDiverged(ArithmeticError):
    def __init__(self, epoch: int, loss_trace, role: str | None = None):
        self.epoch = epoch
        self.loss_trace = list(loss_trace)
        self.role = role
        where = f" ({role})" if role else ""
        super().__init__(f"diverged at epoch {epoch}{where}")


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    width: int
    depth: int = 1
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1 or self.width < 1 or self.depth < 1:
            raise ValueError("input_dim, width and depth must be positive")
        if self.activation.lower() != "relu":
            raise ValueError("only ReLU is supported")

    @classmethod
    def for_sample_size(cls, input_dim: int, n: int, width_factor: int = 32, depth: int = 1):
        return cls(input_dim=input_dim, width=width_factor * n, depth=depth)

    def layer_shapes(self) -> list[tuple[int, int]]:
        shapes = [(self.width, self.input_dim)]
        shapes += [(self.width, self.width)] * (self.depth - 1)
        shapes.append((1, self.width))
        return shapes

    @property
    def n_params(self) -> int:
        return sum(a * b for a, b in self.layer_shapes())


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    ridge: float = 1e-10
    record_loss: bool = False

    def __post_init__(self):
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


@dataclass(frozen=True, eq=False)
class WideNet:
    config: NetConfig
    params: np.ndarray
    init_params: np.ndarray
    loss_trace: tuple[float, ...] | None = field(default=None, repr=False)

    def __post_init__(self):
        p = self.config.n_params
        params = np.array(self.params, dtype=np.float64)
        init = np.array(self.init_params, dtype=np.float64)
        if params.shape != (p,) or init.shape != (p,):
            raise ValueError(f"parameter vectors must have length {p}")
        params.setflags(write=False)
        init.setflags(write=False)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "init_params", init)

    def weights(self, params=None) -> list[np.ndarray]:
        theta = self.params if params is None else params
        out, k = [], 0
        for a, b in self.config.layer_shapes():
            out.append(theta[k:k + a * b].reshape(a, b))
            k += a * b
        return out

    def at_init(self) -> "WideNet":
        return WideNet(self.config, self.init_params, self.init_params)

    def __call__(self, x):
        return forward(self, x)

    # checkpoints -----------------------------------------------------------
    def save(self, path) -> None:
        np.savez(
            path,
            config=json.dumps(self.config.__dict__),
            params=self.params,
            init_params=self.init_params,
        )

    @classmethod
    def load(cls, path) -> "WideNet":
        with np.load(path) as z:
            cfg = NetConfig(**json.loads(str(z["config"])))
            return cls(cfg, z["params"], z["init_params"])


def init_he(config: NetConfig, rng: RngStream) -> WideNet:
    theta = rng.generator().standard_normal(config.n_params)
    return WideNet(config, theta, theta)


def _as_matrix(net: WideNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = x.reshape(1, -1) if single else x
    if xs.ndim != 2 or xs.shape[1] != net.config.input_dim:
        raise ValueError(f"expected inputs with {net.config.input_dim} features, got shape {x.shape}")
    return xs, single


def _forward_cache(weights, xs, width):
    scale = math.sqrt(C_RELU / width)
    pre, acts = [], [xs]
    g = xs
    for w in weights[:-1]:
        f = g @ w.T
        pre.append(f)
        g = scale * np.maximum(f, 0.0)
        acts.append(g)
    out = g @ weights[-1][0]
    return out, pre, acts


def forward(net: WideNet, x, params=None):
    """Network output at ``x``: a float for a vector, an array for a matrix of rows."""
    xs, single = _as_matrix(net, x)
    out, _, _ = _forward_cache(net.weights(params), xs, net.config.width)
    return float(out[0]) if single else out


def _backward(weights, pre, acts, upstream, width):
    """Gradient of ``sum_i upstream[i] * f(x_i)`` with respect to all weights."""
    scale = math.sqrt(C_RELU / width)
    grads = [None] * len(weights)
    grads[-1] = (upstream @ acts[-1]).reshape(1, -1)
    dg = np.outer(upstream, weights[-1][0])
    for l in range(len(weights) - 2, -1, -1):
        df = dg * (scale * (pre[l] > 0))
        grads[l] = df.T @ acts[l]
        if l:
            dg = df @ weights[l]
    return np.concatenate([g.ravel() for g in grads])


def jacobian(net: WideNet, xs) -> np.ndarray:
    """Per-sample parameter gradients, shape ``(n, p)``."""
    xs, _ = _as_matrix(net, xs)
    weights = net.weights()
    width = net.config.width
    scale = math.sqrt(C_RELU / width)
    _, pre, acts = _forward_cache(weights, xs, width)
    n = xs.shape[0]
    blocks = [None] * len(weights)
    blocks[-1] = acts[-1]
    dg = np.broadcast_to(weights[-1][0], (n, width))
    for l in range(len(weights) - 2, -1, -1):
        df = dg * (scale * (pre[l] > 0))
        blocks[l] = (df[:, :, None] * acts[l][:, None, :]).reshape(n, -1)
        if l:
            dg = df @ weights[l]
    return np.concatenate(blocks, axis=1)


def objective(net: WideNet, data: Dataset, ridge: float, params=None) -> float:
    theta = net.params if params is None else params
    resid = forward(net, data.inputs, theta) - data.responses
    dev = theta - net.init_params
    return float(np.mean(resid ** 2) + ridge * dev @ dev)


def _blown_up(loss, scale):
    return not math.isfinite(loss) or loss > BLOWUP_FACTOR * scale


def _gd_depth1(theta, theta0, xs, y, cfg, width, trace, role, scale):
    """Fused in-place GD loop for one hidden layer.

    The hidden units are processed in column blocks of about
    ``BLOCK_ELEMENTS / n`` so the n-by-block activation matrix stays in cache;
    a forward sweep gives the residual and a second sweep recomputes each
    block's activations to form its gradient.
    """
    d = xs.shape[1]
    n = xs.shape[0]
    c = math.sqrt(C_RELU / width)
    W1 = theta[: width * d].reshape(width, d)
    w2 = theta[width * d:]
    W10 = theta0[: width * d].reshape(width, d)
    w20 = theta0[width * d:]
    eta, ridge = cfg.learning_rate, cfg.ridge
    step = max(1, min(width, BLOCK_ELEMENTS // n))
    blocks = [slice(s, s + step) for s in range(0, width, step)]
    out = np.empty(n)
    for epoch in range(cfg.epochs):
        out[:] = 0.0
        for b in blocks:
            F = xs @ W1[b].T
            np.maximum(F, 0.0, out=F)
            out += F @ w2[b]
        out *= c
        resid = out - y
        loss = float(resid @ resid) / n
        if ridge:
            loss += ridge * float(np.sum((theta - theta0) ** 2))
        if epoch == 0:
            scale = max(scale, loss)
        if _blown_up(loss, scale):
            raise TrainingDiverged(epoch, trace, role)
        if cfg.record_loss:
            trace.append(loss)
        cr = (2.0 * c / n) * resid
        for b in blocks:
            F = xs @ W1[b].T
            M = (F > 0) * cr[:, None]
            np.maximum(F, 0.0, out=F)
            g2 = cr @ F
            g1 = (M.T @ xs) * w2[b, None]
            if ridge:
                g1 += 2.0 * ridge * (W1[b] - W10[b])
                g2 += 2.0 * ridge * (w2[b] - w20[b])
            W1[b] -= eta * g1
            w2[b] -= eta * g2


def train_gd(net: WideNet, data: Dataset, cfg: TrainConfig, role: str | None = None) -> WideNet:
    """Full-batch gradient descent on ``mean((f - y)^2) + ridge * |theta - theta_init|^2``."""
    if data.d != net.config.input_dim:
        raise ValueError(f"data has {data.d} features, net expects {net.config.input_dim}")
    theta = net.params.copy()
    theta0 = net.init_params
    xs, y = data.inputs, data.responses
    n = data.n
    width = net.config.width
    trace = []
    scale = max(float(y @ y) / n, 1e-12)
    with np.errstate(over="ignore", invalid="ignore"):
        if net.config.depth == 1:
            _gd_depth1(theta, theta0, xs, y, cfg, width, trace, role, scale)
        else:
            for epoch in range(cfg.epochs):
                weights = net.weights(theta)
                out, pre, acts = _forward_cache(weights, xs, width)
                resid = out - y
                dev = theta - theta0
                loss = float(resid @ resid / n + cfg.ridge * (dev @ dev))
                if epoch == 0:
                    scale = max(scale, loss)
                if _blown_up(loss, scale):
                    raise TrainingDiverged(epoch, trace, role)
                if cfg.record_loss:
                    trace.append(loss)
                grad = _backward(weights, pre, acts, (2.0 / n) * resid, width)
                grad += 2.0 * cfg.ridge * dev
                theta -= cfg.learning_rate * grad
    if not np.all(np.isfinite(theta)):
        raise TrainingDiverged(cfg.epochs, trace, role)
    return replace(net, params=theta, loss_trace=tuple(trace) if cfg.record_loss else None)


def export_loss_trace(net: WideNet, path) -> None:
    if net.loss_trace is None:
        raise ValueError("net carries no loss trace; train with record_loss=True")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(net.loss_trace):
            w.writerow([i, repr(v)])
