"""Shifted kernel ridge regression.

A wide network trained from initial function ``s`` on data ``(X, y)`` behaves
like ``s(x) + K(x, X) (K(X, X) + ridge n I)^{-1} (y - s(X))``.  Passing
different shifts through :func:`solve` gives the single trained network
(shift = that network at init), the idealized deep ensemble (shift = mean
initial function) and, by difference, the procedural noise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .network import WideNet, forward
from .ntk import FactorizationError, GramFactor, NtkKernel, gram

log = logging.getLogger(__name__)

Shift = Callable[[np.ndarray], np.ndarray]

RESIDUAL_TOL = 1e-8


def zero_shift(xs) -> np.ndarray:
    return np.zeros(np.atleast_2d(xs).shape[0])


def net_shift(net: WideNet) -> Shift:
    """The network's initial function ``x -> f_{theta_init}(x)``."""
    init = net.at_init()
    return lambda xs: np.atleast_1d(forward(init, np.atleast_2d(xs)))


def average_shift(shifts: Sequence[Shift]) -> Shift:
    shifts = list(shifts)
    return lambda xs: sum(s(xs) for s in shifts) / len(shifts)


def _eval_shift(shift, xs):
    if shift is None:
        return np.zeros(xs.shape[0])
    return np.asarray(shift(xs), dtype=np.float64).reshape(xs.shape[0])


@dataclass(frozen=True, eq=False)
class KrrSolution:
    train_inputs: np.ndarray
    responses: np.ndarray
    dual_coef: np.ndarray
    ridge: float
    kernel: NtkKernel
    shift: Shift | None
    factor: GramFactor
    shift_values: np.ndarray

    @property
    def n(self) -> int:
        return self.train_inputs.shape[0]

    def __call__(self, x):
        return predict(self, x)

    def fitted(self) -> np.ndarray:
        """``g(X)`` without the shift, i.e. the KRR fit to ``y - s(X)``."""
        return self.kernel.matrix(self.train_inputs) @ self.dual_coef

    def solve_gram(self, rhs) -> np.ndarray:
        """``(K + ridge n I)^{-1} rhs`` with the cached factorization."""
        return self.factor.solve(rhs)


def _refined_solve(values, factor, rhs):
    sol = factor.solve(rhs)
    for _ in range(2):
        resid = rhs - values @ sol
        if np.linalg.norm(resid) <= RESIDUAL_TOL * max(np.linalg.norm(rhs), 1e-300):
            break
        sol = sol + factor.solve(resid)
    return sol


def solve(kernel: NtkKernel, data: Dataset, ridge: float, shift: Shift | None = None) -> KrrSolution:
    if not ridge > 0:
        raise ValueError("ridge must be positive")
    xs = data.inputs
    g = gram(kernel, xs, ridge)
    factor = g.factor()
    s_x = _eval_shift(shift, xs)
    target = data.responses - s_x
    alpha = _refined_solve(g.values, factor, target)
    resid = np.linalg.norm(g.values @ alpha - target)
    scale = np.linalg.norm(target)
    if scale > 0 and resid > RESIDUAL_TOL * scale:
        if factor.jitter == 0.0:
            raise FactorizationError(f"KRR linear solve residual {resid:.3g} exceeds tolerance")
        log.warning("KRR residual %.3g after jitter %.3g", resid, factor.jitter)
    alpha.setflags(write=False)
    return KrrSolution(xs, data.responses, alpha, ridge, kernel, shift, factor, s_x)


def predict(sol: KrrSolution, x):
    """``s(x) + K(x, X) alpha`` for a vector (float) or matrix of rows (array)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = x[None] if single else x
    if xs.shape[1] != sol.train_inputs.shape[1]:
        raise ValueError("dimension mismatch")
    out = _eval_shift(sol.shift, xs) + sol.kernel.matrix(xs, sol.train_inputs) @ sol.dual_coef
    return float(out[0]) if single else out


def predict_direct(kernel: NtkKernel, data: Dataset, ridge: float, shift: Shift | None, x) -> np.ndarray:
    """Evaluate the closed form with an explicit matrix inverse (cross-check only)."""
    xs = np.atleast_2d(np.asarray(x, dtype=np.float64))
    X = data.inputs
    n = X.shape[0]
    inv = np.linalg.inv(kernel.matrix(X) + ridge * n * np.eye(n))
    return _eval_shift(shift, xs) + kernel.matrix(xs, X) @ inv @ (data.responses - _eval_shift(shift, X))


def ensemble_closed_form(kernel: NtkKernel, data: Dataset, ridge: float,
                         mean_shift: Shift | None = None) -> KrrSolution:
    """The infinitely-many-retrainings ensemble: KRR shifted by the mean initial function."""
    return solve(kernel, data, ridge, mean_shift)


def procedural_noise_closed_form(kernel: NtkKernel, inputs, ridge: float,
                                 s_init: Shift, s_mean: Shift | None = None) -> Callable:
    """``x -> s_init(x) - s_mean(x) + K(x, X) (K + ridge n I)^{-1} (s_mean(X) - s_init(X))``."""
    if not ridge > 0:
        raise ValueError("ridge must be positive")
    X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    g = gram(kernel, X, ridge)
    factor = g.factor()
    s_mean = s_mean or zero_shift
    coef = _refined_solve(g.values, factor, _eval_shift(s_mean, X) - _eval_shift(s_init, X))

    def phi(x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xs = x[None] if single else x
        out = _eval_shift(s_init, xs) - _eval_shift(s_mean, xs) + kernel.matrix(xs, X) @ coef
        return float(out[0]) if single else out

    return phi
