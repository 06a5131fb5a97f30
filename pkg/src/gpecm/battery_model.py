"""First-order RC equivalent circuit with a lumped thermal node.

States are SOC ``z``, RC-pair voltage ``v1`` and cell temperature ``tc``.
Current is positive on charge.  Time is in seconds, capacity in Ah, so the
inverse capacity ``q_inv`` is in 1/Ah and is divided by 3600 inside
:func:`step_dynamics`.

The circuit parameters are affine images of dimensionless GPs,
``param = c_f * (1 + gp)``.  Discretisation is an exact zero-order hold on the
current with the parameters held at their start-of-step values.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import interpolate, optimize

SECONDS_PER_HOUR = 3600.0
Z_CLAMP = (-0.05, 1.05)


@dataclass(frozen=True)
class BatteryState:
    z: float
    v1: float
    tc: float

    def as_array(self) -> np.ndarray:
        return np.array([self.z, self.v1, self.tc])

    @classmethod
    def from_array(cls, x) -> "BatteryState":
        return cls(float(x[0]), float(x[1]), float(x[2]))


@dataclass(frozen=True)
class EcmParamSnapshot:
    """Circuit parameter means (and optional variances) at one instant."""

    q_inv: float
    alpha: float
    beta: float
    r0: float
    var_q_inv: float = 0.0
    var_alpha: float = 0.0
    var_beta: float = 0.0
    var_r0: float = 0.0


@dataclass(frozen=True)
class ThermalParams:
    r_c: float
    c_c: float

    def __post_init__(self):
        if not (self.r_c > 0 and self.c_c > 0):
            raise ValueError("thermal resistance and heat capacity must be positive")

    @property
    def tau(self) -> float:
        return self.r_c * self.c_c


def affine(c_f: float, gp_mean: float, gp_var: float = 0.0) -> tuple[float, float]:
    """Map a dimensionless GP value to a physical parameter: ``c_f (1 + x)``."""
    if not c_f > 0:
        raise ValueError("affine constant must be positive")
    return c_f * (1.0 + gp_mean), c_f**2 * gp_var


class OcvCurve:
    """Open-circuit voltage ``V0(z)`` held as a piecewise polynomial.

    Use :meth:`polynomial` for an analytic curve or :meth:`table` for a
    monotone (PCHIP) interpolant through measured points.  Outside the
    tabulated range the end pieces are extrapolated.
    """

    def __init__(self, ppoly: interpolate.PPoly, z_range: tuple[float, float] = (0.0, 1.0)):
        self.ppoly = ppoly
        self._dppoly = ppoly.derivative()
        self.z_range = (float(z_range[0]), float(z_range[1]))
        zs = np.linspace(*self.z_range, 2001)
        if np.any(np.diff(ppoly(zs)) <= 0):
            raise ValueError("OCV curve must be strictly increasing over its range")
        self.v_range = (float(ppoly(self.z_range[0])), float(ppoly(self.z_range[1])))

    @classmethod
    def polynomial(cls, coeffs_ascending) -> "OcvCurve":
        c = np.asarray(coeffs_ascending, dtype=float)[::-1][:, None]
        return cls(interpolate.PPoly(c, np.array([0.0, 1.0]), extrapolate=True))

    @classmethod
    def table(cls, z, v) -> "OcvCurve":
        z = np.asarray(z, dtype=float)
        v = np.asarray(v, dtype=float)
        order = np.argsort(z)
        pchip = interpolate.PchipInterpolator(z[order], v[order], extrapolate=True)
        return cls(interpolate.PPoly(pchip.c, pchip.x, extrapolate=True), (z.min(), z.max()))

    @classmethod
    def from_csv(cls, path: str | Path) -> "OcvCurve":
        """Load a two-column ``z, volts`` table; a header row is required."""
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 3:
            raise ValueError(f"{path}: OCV table needs a header and at least two rows")
        try:
            float(rows[0][0])
        except ValueError:
            pass
        else:
            raise ValueError(f"{path}: header row missing")
        data = np.array([[float(r[0]), float(r[1])] for r in rows[1:] if r], dtype=float)
        return cls.table(data[:, 0], data[:, 1])

    def __call__(self, z):
        return self.ppoly(z)

    def derivative(self, z):
        return self._dppoly(z)

    def inverse(self, v: float, strict: bool = False) -> float:
        """SOC whose OCV is ``v``; out-of-range voltages clamp to the range ends."""
        lo, hi = self.v_range
        if v < lo or v > hi:
            if strict:
                raise ValueError(f"voltage {v:.6f} V outside OCV range [{lo:.6f}, {hi:.6f}]")
            warnings.warn(f"voltage {v:.6f} V outside OCV range, clamped", RuntimeWarning)
            return self.z_range[0] if v < lo else self.z_range[1]
        if v == lo:
            return self.z_range[0]
        if v == hi:
            return self.z_range[1]
        return optimize.brentq(lambda z: float(self.ppoly(z)) - v, *self.z_range, xtol=1e-14, rtol=1e-15)


def table1_ocv() -> OcvCurve:
    return OcvCurve.polynomial([3.64, 0.55, -0.72, 0.75])


def rc_gain(alpha: float, dt: float) -> tuple[float, float, float]:
    """``exp(-alpha dt)``, ``(1 - exp(-alpha dt)) / alpha`` and the gain's alpha-derivative."""
    x = alpha * dt
    decay = math.exp(-x)
    if abs(x) < 1e-8:
        gain = dt * (1.0 - 0.5 * x)
        dgain = -0.5 * dt * dt
    else:
        gain = -math.expm1(-x) / alpha
        dgain = (dt * decay - gain) / alpha
    return decay, gain, dgain


def step_dynamics(
    s: BatteryState,
    i_app: float,
    t_amb: float,
    dt: float,
    p: EcmParamSnapshot,
    th: ThermalParams,
) -> BatteryState:
    """Advance the battery state by ``dt`` seconds at constant current."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    z = s.z + i_app * dt * p.q_inv / SECONDS_PER_HOUR
    if p.alpha > 0:
        decay, gain, _ = rc_gain(p.alpha, dt)
        v1 = decay * s.v1 + p.beta * gain * i_app
    else:
        warnings.warn("non-positive alpha, using forward-Euler RC step", RuntimeWarning)
        v1 = s.v1 + p.beta * i_app * dt
    heat = s.v1 * i_app + p.r0 * i_app**2
    a_t = math.exp(-dt / th.tau)
    steady = t_amb + heat * th.r_c
    tc = steady + (s.tc - steady) * a_t
    return BatteryState(z, v1, tc)


def output(s: BatteryState, i_app: float, p: EcmParamSnapshot, ocv: OcvCurve) -> tuple[float, float]:
    """Terminal voltage and measured temperature."""
    return float(ocv(s.z)) + s.v1 + p.r0 * i_app, s.tc


@dataclass(frozen=True)
class ParamLinearization:
    """A circuit parameter's mean, predictive variance and gradient.

    ``grad`` is the derivative of the mean with respect to the joint state
    vector (battery states first).  ``floored`` marks a positivity floor hit,
    in which case the gradient is zero.
    """

    value: float
    var: float
    grad: np.ndarray
    floored: bool = False


def dynamics_jacobian(
    s: BatteryState,
    i_app: float,
    dt: float,
    q_inv: ParamLinearization,
    alpha: ParamLinearization,
    beta: ParamLinearization,
    r0: ParamLinearization,
    th: ThermalParams,
) -> np.ndarray:
    """Battery rows ``(3, n)`` of the joint transition Jacobian.

    The remaining rows of the joint Jacobian are identity (GP states are
    constant within a segment).
    """
    n = q_inv.grad.shape[0]
    G = np.zeros((3, n))
    # z row
    G[0] = i_app * dt / SECONDS_PER_HOUR * q_inv.grad
    G[0, 0] += 1.0
    # v1 row
    decay, gain, dgain = rc_gain(alpha.value, dt)
    dv_dalpha = -dt * decay * s.v1 + beta.value * i_app * dgain
    dv_dbeta = gain * i_app
    G[1] = dv_dalpha * alpha.grad + dv_dbeta * beta.grad
    G[1, 1] += decay
    # tc row
    a_t = math.exp(-dt / th.tau)
    heat_gain = th.r_c * (1.0 - a_t)
    G[2] = heat_gain * i_app**2 * r0.grad
    G[2, 1] += heat_gain * i_app
    G[2, 2] += a_t
    return G


def observation_jacobian(s: BatteryState, i_app: float, r0: ParamLinearization, ocv: OcvCurve) -> np.ndarray:
    """Jacobian ``(2, n)`` of ``[V, T]`` with respect to the joint state."""
    n = r0.grad.shape[0]
    H = np.zeros((2, n))
    H[0] = i_app * r0.grad
    H[0, 0] += float(ocv.derivative(s.z))
    H[0, 1] += 1.0
    H[1, 2] = 1.0
    return H


def linearize(
    s: BatteryState,
    i_app: float,
    dt: float,
    params: dict[str, ParamLinearization],
    th: ThermalParams,
    ocv: OcvCurve,
) -> tuple[np.ndarray, np.ndarray]:
    """Full joint Jacobians ``G (n, n)`` and ``H (2, n)`` at one state and current.

    ``params`` holds linearisations for ``q_inv``, ``alpha``, ``beta`` and
    ``r0`` keyed by name.
    """
    n = params["r0"].grad.shape[0]
    G = np.eye(n)
    G[:3] = dynamics_jacobian(s, i_app, dt, params["q_inv"], params["alpha"], params["beta"], params["r0"], th)
    H = observation_jacobian(s, i_app, params["r0"], ocv)
    return G, H


def lambda_terms(
    s: BatteryState,
    i_app: float,
    dt: float,
    mu_alpha: float,
    var_alpha: float,
    var_beta: float,
    var_r0: float,
    th: ThermalParams,
) -> tuple[np.ndarray, float]:
    """Extra propagation and output variance from GP predictive variance.

    Returns the ``3x3`` battery block added to the predicted covariance and
    the scalar added to the voltage innovation variance.  Variances are in
    physical units.
    """
    if min(var_alpha, var_beta, var_r0) < 0:
        raise ValueError("predictive variances must be non-negative")
    lam = np.zeros((3, 3))
    _, gain, _ = rc_gain(mu_alpha, dt)
    lam[1, 1] = var_beta * (i_app * gain) ** 2 + var_alpha * s.v1**2
    a_t = math.exp(-dt / th.tau)
    lam[2, 2] = var_r0 * (th.r_c * i_app**2 * (1.0 - a_t)) ** 2
    return lam, var_r0 * i_app**2
