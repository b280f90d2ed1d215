"""Neural tangent kernels for bias-free ReLU networks.

The analytic kernel is the infinite-width limit of the network in
:mod:`pncuq.network`.  With ``c = 2`` the ReLU layer maps a Gaussian pair with
covariance ``[[a, c], [c, b]]`` to

    Sigma(a, b, c)  = sqrt(ab)/pi * (sqrt(1 - rho^2) + rho (pi - arccos rho))
    Sigma'(a, b, c) = (pi - arccos rho) / pi,        rho = c / sqrt(ab)

and the kernel accumulates ``Theta_l = Theta_{l-1} Sigma'_l + Sigma_l`` from
``Theta_0 = Sigma_0 = x.x'``.  Note that ``Sigma(a, a, a) = a``, so the
diagonal of every layer covariance equals ``|x|^2``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .network import WideNet, jacobian

log = logging.getLogger(__name__)

PSD_TOL = 1e-9


class KernelError(ValueError):
    pass


class FactorizationError(np.linalg.LinAlgError):
    pass


def _rho(a, b, c):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if np.any(a < 0) or np.any(b < 0):
        raise KernelError("marginal variances must be nonnegative")
    ab = a * b
    if np.any(c * c > ab * (1 + PSD_TOL) + 1e-300):
        raise KernelError("covariance matrix is not positive semidefinite (c^2 > ab)")
    degenerate = ab <= 0
    root = np.sqrt(np.where(degenerate, 1.0, ab))
    rho = np.clip(c / root, -1.0, 1.0)
    return rho, np.where(degenerate, 0.0, root), degenerate


def relu_sigma(a, b, c):
    """``2 E[relu(u) relu(v)]`` for ``(u, v) ~ N(0, [[a, c], [c, b]])``."""
    rho, root, degenerate = _rho(a, b, c)
    val = root / np.pi * (np.sqrt(1.0 - rho * rho) + rho * (np.pi - np.arccos(rho)))
    val = np.where(degenerate, 0.0, val)
    return float(val) if np.ndim(val) == 0 else val


def relu_sigma_prime(a, b, c):
    """``2 E[1{u > 0} 1{v > 0}]`` for the same Gaussian pair."""
    rho, _, degenerate = _rho(a, b, c)
    val = np.where(degenerate, 0.0, (np.pi - np.arccos(rho)) / np.pi)
    return float(val) if np.ndim(val) == 0 else val


class Mode(str, enum.Enum):
    ANALYTIC = "analytic"
    EMPIRICAL = "empirical"


@dataclass(frozen=True, eq=False)
class NtkKernel:
    mode: Mode = Mode.ANALYTIC
    depth: int = 1
    net: WideNet | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.mode is Mode.EMPIRICAL:
            if self.net is None:
                raise KernelError("empirical kernel needs a reference network")
            object.__setattr__(self, "depth", self.net.config.depth)
        if self.depth < 1:
            raise KernelError("depth must be positive")

    @classmethod
    def analytic(cls, depth: int = 1) -> "NtkKernel":
        return cls(Mode.ANALYTIC, depth)

    @classmethod
    def empirical(cls, net: WideNet) -> "NtkKernel":
        return cls(Mode.EMPIRICAL, net.config.depth, net)

    def matrix(self, xs1, xs2=None) -> np.ndarray:
        """Kernel matrix ``K(xs1[i], xs2[j])``."""
        xs1 = _rows(xs1)
        xs2 = xs1 if xs2 is None else _rows(xs2)
        if xs1.shape[1] != xs2.shape[1]:
            raise KernelError("input dimensions differ")
        if self.mode is Mode.ANALYTIC:
            return _analytic_matrix(xs1, xs2, self.depth)
        if xs1.shape[1] != self.net.config.input_dim:
            raise KernelError("input dimension does not match the reference net")
        j1 = jacobian(self.net, xs1)
        j2 = j1 if xs2 is xs1 else jacobian(self.net, xs2)
        return j1 @ j2.T

    def __call__(self, x, x2) -> float:
        x, x2 = np.asarray(x, float), np.asarray(x2, float)
        if x.shape != x2.shape or x.ndim != 1:
            raise KernelError("kernel arguments must be vectors of equal length")
        return float(self.matrix(x[None], x2[None])[0, 0])


def _rows(xs) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs[None]
    if xs.ndim != 2:
        raise KernelError("expected a matrix of input rows")
    return xs


def _analytic_matrix(xs1, xs2, depth):
    q1 = np.einsum("ij,ij->i", xs1, xs1)[:, None]
    q2 = np.einsum("ij,ij->i", xs2, xs2)[None, :]
    sigma = xs1 @ xs2.T
    # rounding can push |c| a hair above sqrt(ab); clip before the PSD check
    bound = np.sqrt(q1 * q2)
    sigma = np.clip(sigma, -bound, bound)
    theta = sigma
    for _ in range(depth):
        dot = relu_sigma_prime(q1, q2, sigma)
        sigma = relu_sigma(q1, q2, sigma)
        theta = theta * dot + sigma
    return theta


def analytic_ntk(kernel: NtkKernel, x, x2) -> float:
    if kernel.mode is not Mode.ANALYTIC:
        raise KernelError("analytic_ntk needs an analytic kernel")
    return kernel(x, x2)


def empirical_ntk(kernel: NtkKernel, x, x2) -> float:
    if kernel.mode is not Mode.EMPIRICAL:
        raise KernelError("empirical_ntk needs an empirical kernel")
    return kernel(x, x2)


def kernel_vector(kernel: NtkKernel, x, xs) -> np.ndarray:
    xs = _rows(xs)
    if xs.shape[0] < 1:
        raise KernelError("need at least one input row")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != xs.shape[1]:
        raise KernelError("dimension mismatch")
    return kernel.matrix(x[None], xs)[0]


@dataclass(frozen=True, eq=False)
class GramFactor:
    """Cholesky factor of a (possibly jittered) Gram matrix."""

    chol: np.ndarray
    jitter: float
    rank: int

    def solve(self, rhs) -> np.ndarray:
        return scipy.linalg.cho_solve((self.chol, True), rhs, check_finite=False)

    @property
    def rank_deficient(self) -> bool:
        return self.rank < self.chol.shape[0]


def _try_cholesky(a):
    try:
        c = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return None
    piv = np.diag(c) ** 2
    if piv.min() <= a.shape[0] * np.finfo(float).eps * np.abs(np.diag(a)).max():
        return None
    return c


def factorize(values: np.ndarray) -> GramFactor:
    """Cholesky with one jitter escalation (``1e-12 trace / n``) on failure."""
    a = np.asarray(values, dtype=np.float64)
    n = a.shape[0]
    chol = _try_cholesky(a)
    if chol is not None:
        return GramFactor(chol, 0.0, n)
    _, _, rank, _ = lapack.dpstrf(a.copy(), lower=1, tol=-1.0)
    jitter = 1e-12 * np.trace(a) / n
    log.warning("Gram matrix not positive definite (pivoted rank %d of %d); adding jitter %.3g",
                rank, n, jitter)
    chol = _try_cholesky(a + jitter * np.eye(n))
    if chol is None:
        raise FactorizationError(f"Gram factorization failed after jitter {jitter:.3g}")
    return GramFactor(chol, jitter, int(rank))


@dataclass(frozen=True, eq=False)
class GramMatrix:
    values: np.ndarray
    ridge: float
    kernel_values: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def factor(self) -> GramFactor:
        return factorize(self.values)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.values)[0])

    def export(self, path) -> None:
        """Raw row-major little-endian float64, ``n * n`` values."""
        np.ascontiguousarray(self.values, dtype="<f8").tofile(Path(path))


def gram(kernel: NtkKernel, xs, ridge: float = 0.0) -> GramMatrix:
    """``K(xs, xs) + ridge * n * I``."""
    if ridge < 0:
        raise KernelError("ridge must be nonnegative")
    xs = _rows(xs)
    k = kernel.matrix(xs)
    k = 0.5 * (k + k.T)
    if not np.all(np.isfinite(k)):
        raise KernelError("non-finite kernel value")
    n = xs.shape[0]
    vals = k + ridge * n * np.eye(n) if ridge else k.copy()
    return GramMatrix(vals, ridge, k)
