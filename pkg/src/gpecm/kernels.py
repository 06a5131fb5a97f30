"""Covariance functions and their exact discrete-time state-space forms.

Three kernels are used:

* squared exponential (SE) over the operating point ``(z, I)``,
* Wiener velocity (WV) over the lifetime coordinate ``zeta``,
* exponential (E, Ornstein-Uhlenbeck) over ``zeta`` for short-term fluctuations.

The WV and E kernels are Markovian in ``zeta`` and therefore have finite
state-space representations; :func:`wv_discrete` and :func:`exp_discrete`
return the exact transition and process-noise matrices for a step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

INPUT_DIMS = ("z", "I")


@dataclass(frozen=True)
class SeKernelParams:
    """SE kernel over a subset of ``("z", "I")``.

    ``inv_lengthscales`` maps input name to the inverse squared length scale.
    An empty mapping gives a constant kernel equal to ``magnitude_sq``.
    """

    magnitude_sq: float
    inv_lengthscales: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.magnitude_sq > 0:
            raise ValueError(f"magnitude_sq must be positive, got {self.magnitude_sq}")
        for name, gamma in self.inv_lengthscales.items():
            if name not in INPUT_DIMS:
                raise ValueError(f"unknown input dimension {name!r}")
            if not gamma > 0:
                raise ValueError(f"inverse length scale for {name!r} must be positive")

    @property
    def dims(self) -> tuple[str, ...]:
        return tuple(d for d in INPUT_DIMS if d in self.inv_lengthscales)

    def gamma_vector(self) -> np.ndarray:
        return np.array([self.inv_lengthscales[d] for d in self.dims], dtype=float)


@dataclass(frozen=True)
class WvKernelParams:
    """Wiener-velocity kernel: spectral scale and truncation offset ``zeta0``."""

    magnitude_sq: float
    zeta0: float

    def __post_init__(self):
        if not self.magnitude_sq > 0:
            raise ValueError("WV magnitude_sq must be positive")
        if not self.zeta0 > 0:
            raise ValueError("WV zeta0 must be positive")

    @classmethod
    def truncated(cls, magnitude_sq: float, bol_variance: float) -> "WvKernelParams":
        """Build params whose prior variance at ``zeta0`` equals ``bol_variance``."""
        return cls(magnitude_sq, solve_zeta0(bol_variance, magnitude_sq))


@dataclass(frozen=True)
class ExpKernelParams:
    magnitude_sq: float
    inv_lengthscale: float

    def __post_init__(self):
        if not self.magnitude_sq > 0 or not self.inv_lengthscale > 0:
            raise ValueError("exponential kernel parameters must be positive")


def _point_vector(x, dims: tuple[str, ...]) -> np.ndarray:
    if isinstance(x, Mapping):
        if set(x) != set(dims):
            raise ValueError(f"input dims {sorted(x)} do not match kernel dims {list(dims)}")
        return np.array([x[d] for d in dims], dtype=float)
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.shape != (len(dims),):
        raise ValueError(f"expected {len(dims)} input values, got shape {arr.shape}")
    return arr


def se_cov(x, x_prime, p: SeKernelParams) -> float:
    """SE covariance between two operating points.

    Points are mappings keyed by input name (``{"z": 0.4, "I": -2.0}``) or
    sequences ordered as ``p.dims``.
    """
    a = _point_vector(x, p.dims)
    b = _point_vector(x_prime, p.dims)
    return float(p.magnitude_sq * math.exp(-0.5 * float(np.sum(p.gamma_vector() * (a - b) ** 2))))


def se_gram(X: np.ndarray, Y: np.ndarray, p: SeKernelParams) -> np.ndarray:
    """SE Gram matrix between row-stacked points ``X (n, d)`` and ``Y (m, d)``."""
    d = len(p.dims)
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    X = X.reshape(-1, d) if d else X.reshape(len(X), 0)
    Y = Y.reshape(-1, d) if d else Y.reshape(len(Y), 0)
    gamma = p.gamma_vector()
    sq = np.zeros((X.shape[0], Y.shape[0]))
    for k in range(len(p.dims)):
        sq += gamma[k] * (X[:, k, None] - Y[None, :, k]) ** 2
    return p.magnitude_sq * np.exp(-0.5 * sq)


def wv_cov(zeta: float, zeta_prime: float, p: WvKernelParams) -> float:
    """WV covariance. No ``zeta0`` shift is applied here."""
    if zeta < 0 or zeta_prime < 0:
        raise ValueError("WV kernel is defined for non-negative inputs only")
    lo = min(zeta, zeta_prime)
    return p.magnitude_sq * (lo**3 / 3.0 + abs(zeta - zeta_prime) * lo**2 / 2.0)


def wv_gram(a: np.ndarray, b: np.ndarray, magnitude_sq: float) -> np.ndarray:
    a = np.asarray(a, dtype=float)[:, None]
    b = np.asarray(b, dtype=float)[None, :]
    lo = np.minimum(a, b)
    return magnitude_sq * (lo**3 / 3.0 + np.abs(a - b) * lo**2 / 2.0)


def exp_cov(zeta: float, zeta_prime: float, p: ExpKernelParams) -> float:
    return p.magnitude_sq * math.exp(-p.inv_lengthscale * abs(zeta - zeta_prime))


def exp_gram(a: np.ndarray, b: np.ndarray, p: ExpKernelParams) -> np.ndarray:
    a = np.asarray(a, dtype=float)[:, None]
    b = np.asarray(b, dtype=float)[None, :]
    return p.magnitude_sq * np.exp(-p.inv_lengthscale * np.abs(a - b))


def wv_noise(delta_zeta: float, magnitude_sq: float) -> np.ndarray:
    d = delta_zeta
    return magnitude_sq * np.array([[d**3 / 3.0, d**2 / 2.0], [d**2 / 2.0, d]])


def wv_discrete(delta_zeta: float, p: WvKernelParams) -> tuple[np.ndarray, np.ndarray]:
    """Transition ``exp(F dzeta)`` and process noise of the WV SDE.

    ``F = [[0, 1], [0, 0]]`` is nilpotent so the exponential is exact.
    """
    if delta_zeta < 0:
        raise ValueError(f"negative lifetime step {delta_zeta}")
    transition = np.array([[1.0, delta_zeta], [0.0, 1.0]])
    return transition, wv_noise(delta_zeta, p.magnitude_sq)


def exp_discrete(delta_zeta: float, p: ExpKernelParams) -> tuple[float, float]:
    if delta_zeta < 0:
        raise ValueError(f"negative lifetime step {delta_zeta}")
    decay = math.exp(-p.inv_lengthscale * delta_zeta)
    noise = p.magnitude_sq * -math.expm1(-2.0 * p.inv_lengthscale * delta_zeta)
    return decay, noise


def solve_zeta0(sigma_x_sq: float, sigma_zeta_sq: float) -> float:
    """Offset at which the WV prior variance equals ``sigma_x_sq``."""
    if not sigma_x_sq > 0 or not sigma_zeta_sq > 0:
        raise ValueError("solve_zeta0 needs positive variances")
    return (3.0 * sigma_x_sq / sigma_zeta_sq) ** (1.0 / 3.0)
