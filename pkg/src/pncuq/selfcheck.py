"""Oracle suites run by ``pncuq selfcheck``.

Each check compares a library routine against an independent computation:
Monte Carlo for the ReLU Gaussian expectations, an explicitly re-solved
weighted ridge problem for the influence function, numeric integration of the
density for the quantiles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize

from .data import SyntheticSpec, generate_synthetic
from .krr import solve
from .ntk import NtkKernel, relu_sigma, relu_sigma_prime
from .inference import ij_influence
from .rng import RngStream
from .stats import clopper_pearson, t_quantile

RHO_GRID = (-1.0, -0.5, 0.0, 0.5, 0.9, 1.0)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def mc_relu_expectations(rho: float, samples: int, rng: RngStream, chunk: int = 10 ** 6):
    """Monte Carlo ``(2 E[relu(u) relu(v)], 2 E[1{u>0} 1{v>0}])`` for unit variances."""
    gen = rng.generator()
    s = sp = 0.0
    left = samples
    root = math.sqrt(max(1.0 - rho * rho, 0.0))
    while left:
        k = min(chunk, left)
        u = gen.standard_normal(k)
        v = rho * u + root * gen.standard_normal(k)
        s += float(np.sum(np.maximum(u, 0.0) * np.maximum(v, 0.0)))
        sp += float(np.count_nonzero((u > 0) & (v > 0)))
        left -= k
    return 2.0 * s / samples, 2.0 * sp / samples


def weighted_krr_value(kernel, xs, targets, weights, ridge, x0) -> float:
    """Minimizer of ``sum_i w_i (t_i - g(x_i))^2 + ridge |g|^2`` evaluated at ``x0``."""
    K = kernel.matrix(xs)
    alpha = np.linalg.solve(np.diag(weights) @ K + ridge * np.eye(len(targets)), weights * targets)
    return float(kernel.matrix(np.atleast_2d(x0), xs)[0] @ alpha)


def finite_difference_influence(sol, z, x0, eps: float) -> float:
    """``(T((1 - eps) P_n + eps delta_z)(x0) - T(P_n)(x0)) / eps`` by direct re-solves."""
    X, y = sol.train_inputs, sol.responses - sol.shift_values
    n = X.shape[0]
    z_x, z_y = np.asarray(z[0], float), float(z[1])
    z_t = z_y - (float(sol.shift(z_x[None])[0]) if sol.shift is not None else 0.0)
    base = weighted_krr_value(sol.kernel, X, y, np.full(n, 1.0 / n), sol.ridge, x0)
    Xe = np.vstack([X, z_x])
    ye = np.append(y, z_t)
    we = np.append(np.full(n, (1.0 - eps) / n), eps)
    return (weighted_krr_value(sol.kernel, Xe, ye, we, sol.ridge, x0) - base) / eps


def t_quantile_by_integration(df: float, p: float) -> float:
    """Root of the numerically integrated t (or normal) density."""
    if math.isinf(df):
        pdf = lambda t: math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
    else:
        c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
        pdf = lambda t: c * (1 + t * t / df) ** (-(df + 1) / 2)
    cdf = lambda t: 0.5 + math.copysign(integrate.quad(pdf, 0.0, abs(t), epsabs=1e-13, epsrel=1e-12)[0], t)
    hi = 1.0
    while cdf(hi) < p:
        hi *= 2
    return optimize.brentq(lambda t: cdf(t) - p, -hi, hi, xtol=1e-12)


def check_ntk(samples: int = 10 ** 7, tol: float = 1e-3) -> CheckResult:
    worst = 0.0
    for i, rho in enumerate(RHO_GRID):
        mc_s, mc_sp = mc_relu_expectations(rho, samples, RngStream(2024, 0, (i,)))
        worst = max(worst, abs(mc_s - relu_sigma(1.0, 1.0, rho)), abs(mc_sp - relu_sigma_prime(1.0, 1.0, rho)))
    return CheckResult("NTK Gaussian expectations vs Monte Carlo", worst <= tol,
                       f"max abs error {worst:.2e} (tol {tol:g}, {samples} samples)")


def check_influence() -> CheckResult:
    kernel = NtkKernel.analytic(1)
    data = generate_synthetic(SyntheticSpec(dim=2), 8, RngStream(7))
    sol = solve(kernel, data, 1e-2)
    x0 = np.array([0.1, 0.1])
    ratios = []
    for z in ((data.inputs[0], data.responses[0]), (np.array([0.05, 0.15]), 0.3)):
        inf = ij_influence(sol, z, x0)
        e3 = abs(finite_difference_influence(sol, z, x0, 1e-3) - inf)
        e4 = abs(finite_difference_influence(sol, z, x0, 1e-4) - inf)
        ratios.append(e3 / e4)
    ok = all(7 <= r <= 13 for r in ratios)
    return CheckResult("influence function vs finite differences", ok,
                       "error ratios " + ", ".join(f"{r:.2f}" for r in ratios) + " (expect about 10)")


def check_quantiles(tol: float = 1e-3) -> CheckResult:
    worst = 0.0
    for df in (1, 3, 10, math.inf):
        for p in (0.9, 0.95, 0.975):
            worst = max(worst, abs(t_quantile(df, p) - t_quantile_by_integration(df, p)))
    cp = clopper_pearson(95, 100) + clopper_pearson(100, 100)
    want = (0.887, 0.984, 0.964, 1.000)
    cp_err = max(abs(a - b) for a, b in zip(cp, want))
    ok = worst <= tol and cp_err <= 1e-3
    return CheckResult("quantiles vs numeric integration", ok,
                       f"max quantile error {worst:.1e}; Clopper-Pearson table error {cp_err:.1e}")


def run_all(quick: bool = False) -> list[CheckResult]:
    return [check_ntk(10 ** 6 if quick else 10 ** 7, 4e-3 if quick else 1e-3),
            check_influence(), check_quantiles()]
