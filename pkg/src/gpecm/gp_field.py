"""Spatially discretised GPs over the operating point with WV dynamics in lifetime.

Each circuit parameter is a zero-mean GP whose kernel is the product of an SE
kernel over the operating point and a WV kernel over ``zeta``, plus an
exponential kernel over ``zeta`` that adds the same fluctuation to every
operating point.  Discretising the operating point on a grid ``U`` turns the
product part into ``len(U)`` coupled WV processes, each carried as a
``(value, derivative)`` pair.

State ordering inside one field's smooth block is interleaved per grid point,
``[v_0, d_0, v_1, d_1, ...]``, which is the ordering of ``kron(I_n, F_wv)``.
For two-dimensional grids the points are z-major: all current values for the
first SOC value, then all for the second, and so on.

The batch (``O(n^3)``) regression formulas are kept here as oracles for the
recursive path.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from .kernels import (
    ExpKernelParams,
    SeKernelParams,
    WvKernelParams,
    exp_discrete,
    se_gram,
    wv_noise,
)

JITTER = 1e-10


class ConditioningError(np.linalg.LinAlgError):
    """A covariance or Gram matrix could not be factorised."""


def jittered_cholesky(K: np.ndarray, jitter: float = JITTER) -> tuple[np.ndarray, bool]:
    """Lower Cholesky factor of ``K + jitter * mean(diag(K)) * I``."""
    scale = float(np.mean(np.diag(K))) if K.size else 0.0
    eps = jitter * scale if scale > 0 else jitter
    try:
        return linalg.cho_factor(K + eps * np.eye(K.shape[0]), lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise ConditioningError(f"Gram matrix not positive definite ({exc})") from exc


@dataclass(frozen=True)
class Grid:
    """Discretisation points ``U`` for one field.

    ``coords`` has shape ``(n, len(dims))``; a field with no inputs has a
    single point with zero columns.
    """

    coords: np.ndarray
    dims: tuple[str, ...]

    def __post_init__(self):
        if not self.dims:
            coords = np.zeros((1, 0))
        else:
            coords = np.asarray(self.coords, dtype=float).reshape(-1, len(self.dims))
        if coords.shape[0] == 0:
            raise ValueError("grid must have at least one point")
        if len(self.dims) and len(np.unique(coords, axis=0)) != coords.shape[0]:
            raise ValueError("grid points must be unique")
        object.__setattr__(self, "coords", coords)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @classmethod
    def constant(cls) -> "Grid":
        return cls(np.zeros((1, 0)), ())

    @classmethod
    def soc(cls, z_range: tuple[float, float], n_z: int) -> "Grid":
        return cls(np.linspace(z_range[0], z_range[1], n_z)[:, None], ("z",))

    @classmethod
    def soc_current(
        cls,
        z_range: tuple[float, float],
        n_z: int,
        i_range: tuple[float, float],
        n_i: int,
    ) -> "Grid":
        z = np.linspace(z_range[0], z_range[1], n_z)
        i = np.linspace(i_range[0], i_range[1], n_i)
        zz, ii = np.meshgrid(z, i, indexing="ij")
        return cls(np.column_stack([zz.ravel(), ii.ravel()]), ("z", "I"))

    def column(self, dim: str) -> np.ndarray:
        return self.coords[:, self.dims.index(dim)]


@dataclass(frozen=True)
class GpField:
    """Structure and hyperparameters of one discretised parameter GP.

    The state itself (means and covariances) lives in the joint state.
    Either temporal channel may be switched off by passing ``None``.
    """

    name: str
    grid: Grid
    se: SeKernelParams
    wv: WvKernelParams | None
    exp: ExpKernelParams | None

    def __post_init__(self):
        if tuple(self.se.dims) != tuple(self.grid.dims):
            raise ValueError(
                f"field {self.name!r}: kernel dims {self.se.dims} do not match grid dims {self.grid.dims}"
            )
        if self.wv is None and self.exp is None:
            raise ValueError(f"field {self.name!r} has no temporal channel")

    @property
    def n_points(self) -> int:
        return len(self.grid)

    @property
    def n_smooth(self) -> int:
        return 2 * self.n_points if self.wv is not None else 0

    @property
    def n_noise(self) -> int:
        return 1 if self.exp is not None else 0

    def gram(self) -> np.ndarray:
        """``K_se(U, U)`` including the SE magnitude."""
        return se_gram(self.grid.coords, self.grid.coords, self.se)

    def correlation(self) -> np.ndarray:
        """``K_se(U, U)`` normalised to unit diagonal."""
        return self.gram() / self.se.magnitude_sq

    def with_params(self, **changes) -> "GpField":
        return replace(self, **changes)


def init_field_cov(field: GpField) -> np.ndarray:
    """Prior covariance of one field's state block at beginning of life.

    Smooth block is ``R_se(U, U) kron P_wv(zeta0)`` where ``R_se`` is the SE
    correlation and ``P_wv(zeta0)`` has top-left entry equal to the SE
    magnitude (via the ``zeta0`` truncation), so every grid value starts with
    variance ``sigma_x^2``.  The noise channel starts at its stationary
    variance.
    """
    blocks = []
    if field.wv is not None:
        p0 = wv_noise(field.wv.zeta0, field.wv.magnitude_sq)
        blocks.append(np.kron(field.correlation(), p0))
    if field.exp is not None:
        blocks.append(np.array([[field.exp.magnitude_sq]]))
    return linalg.block_diag(*blocks)


def propagate_field(
    field: GpField, mean: np.ndarray, cov: np.ndarray, delta_zeta: float
) -> tuple[np.ndarray, np.ndarray]:
    """Advance one field block (smooth states then noise state) by ``delta_zeta``."""
    A, Q = field_transition(field, delta_zeta)
    return A @ mean, _sym(A @ cov @ A.T + Q)


def field_transition(field: GpField, delta_zeta: float) -> tuple[np.ndarray, np.ndarray]:
    if delta_zeta < 0:
        raise ValueError(f"negative lifetime step {delta_zeta}")
    A_blocks, Q_blocks = [], []
    if field.wv is not None:
        a_wv = np.array([[1.0, delta_zeta], [0.0, 1.0]])
        A_blocks.append(np.kron(np.eye(field.n_points), a_wv))
        Q_blocks.append(np.kron(field.correlation(), wv_noise(delta_zeta, field.wv.magnitude_sq)))
    if field.exp is not None:
        decay, q = exp_discrete(delta_zeta, field.exp)
        A_blocks.append(np.array([[decay]]))
        Q_blocks.append(np.array([[q]]))
    return linalg.block_diag(*A_blocks), linalg.block_diag(*Q_blocks)


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


class GpSubsystem:
    """All parameter GPs stacked: every smooth block first, then the noise states.

    ``value_index(name)`` etc. give positions inside the GP subsystem vector.
    """

    def __init__(self, fields: Sequence[GpField]):
        self.fields = tuple(fields)
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ValueError("field names must be unique")
        self._smooth_offset = {}
        offset = 0
        for f in self.fields:
            self._smooth_offset[f.name] = offset
            offset += f.n_smooth
        self._noise_offset = {}
        for f in self.fields:
            if f.n_noise:
                self._noise_offset[f.name] = offset
                offset += 1
        self.dim = offset

    def __getitem__(self, name: str) -> GpField:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)

    def value_index(self, name: str) -> np.ndarray:
        f = self[name]
        if f.wv is None:
            return np.zeros(0, dtype=int)
        return self._smooth_offset[name] + 2 * np.arange(f.n_points)

    def deriv_index(self, name: str) -> np.ndarray:
        return self.value_index(name) + 1

    def smooth_slice(self, name: str) -> slice:
        start = self._smooth_offset[name]
        return slice(start, start + self[name].n_smooth)

    def noise_index(self, name: str) -> int | None:
        return self._noise_offset.get(name)

    def field_index(self, name: str) -> np.ndarray:
        """Smooth states then noise state of one field, in field-local order."""
        s = self.smooth_slice(name)
        idx = list(range(s.start, s.stop))
        if self.noise_index(name) is not None:
            idx.append(self.noise_index(name))
        return np.array(idx, dtype=int)

    def initial_mean(self) -> np.ndarray:
        return np.zeros(self.dim)

    def initial_cov(self) -> np.ndarray:
        P = np.zeros((self.dim, self.dim))
        for f in self.fields:
            idx = self.field_index(f.name)
            P[np.ix_(idx, idx)] = init_field_cov(f)
        return P

    def transition(self, delta_zeta: float) -> tuple[np.ndarray, np.ndarray]:
        """Transition matrix and process noise of the whole subsystem."""
        A = np.zeros((self.dim, self.dim))
        Q = np.zeros((self.dim, self.dim))
        for f in self.fields:
            idx = self.field_index(f.name)
            Af, Qf = field_transition(f, delta_zeta)
            A[np.ix_(idx, idx)] = Af
            Q[np.ix_(idx, idx)] = Qf
        return A, Q

    def propagate(self, mean: np.ndarray, cov: np.ndarray, delta_zeta: float):
        A, Q = self.transition(delta_zeta)
        return A @ mean, _sym(A @ cov @ A.T + Q), A

    def with_fields(self, fields: Sequence[GpField]) -> "GpSubsystem":
        return GpSubsystem(fields)


# ---------------------------------------------------------------------------
# Prediction at off-grid operating points


def _se_gamma(field: GpField, dim: str) -> float:
    return field.se.inv_lengthscales[dim]


def regression_weights(
    field: GpField, x_star, state_cov_diag: np.ndarray
) -> np.ndarray:
    """Weights ``w = k(x*, U) (K_uu + diag(P))^-1`` mapping grid values to ``f(x*)``."""
    x = np.asarray(x_star, dtype=float).reshape(1, -1)
    k = se_gram(x, field.grid.coords, field.se)[0]
    cho = jittered_cholesky(field.gram() + np.diag(np.asarray(state_cov_diag, dtype=float)))
    return linalg.cho_solve(cho, k, check_finite=False)


@dataclass(frozen=True)
class SmoothPrediction:
    """Prediction of a field's smooth part at an uncertain SOC and known current."""

    mean: float
    var: float
    weights: np.ndarray  # d mean / d grid values
    dmean_dz: float  # d mean / d mu_z


def smooth_prediction(
    field: GpField,
    mu_z: float,
    var_z: float,
    i_now: float,
    values: np.ndarray,
    value_var: np.ndarray,
) -> SmoothPrediction:
    """Moments of ``f(z, I)`` with ``z ~ N(mu_z, var_z)`` and ``I`` known.

    The grid values are treated as noisy observations of the function with
    noise ``diag(value_var)``.  Only ``z`` is averaged over; ``I`` enters
    through the SE distances alone.
    """
    if var_z < 0:
        raise ValueError(f"negative SOC variance {var_z}")
    dims = field.grid.dims
    sig2 = field.se.magnitude_sq
    n = field.n_points
    k_i = np.ones(n)
    if "I" in dims:
        k_i = np.exp(-0.5 * _se_gamma(field, "I") * (i_now - field.grid.column("I")) ** 2)
    if "z" in dims:
        gz = _se_gamma(field, "z")
        uz = field.grid.column("z")
        denom = 1.0 / gz + var_z
        diff = mu_z - uz
        l = sig2 * k_i * np.exp(-0.5 * diff**2 / denom) / np.sqrt(gz * var_z + 1.0)
        dl = -l * diff / denom
    else:
        l = sig2 * k_i
        dl = np.zeros(n)

    cho = jittered_cholesky(field.gram() + np.diag(value_var))
    delta = linalg.cho_solve(cho, values, check_finite=False)
    w = linalg.cho_solve(cho, l, check_finite=False)
    mean = float(l @ delta)

    if "z" in dims and var_z > 0:
        c = 1.0 + 2.0 * gz * var_z
        zbar = 0.5 * (uz[:, None] + uz[None, :])
        dz = uz[:, None] - uz[None, :]
        Ez = np.exp(-0.25 * gz * dz**2 - gz * (mu_z - zbar) ** 2 / c) / np.sqrt(c)
        L = sig2**2 * Ez * np.outer(k_i, k_i)
        K_inv_L = linalg.cho_solve(cho, L, check_finite=False)
        var = sig2 - np.trace(K_inv_L) + delta @ L @ delta - mean**2
    else:
        var = sig2 - l @ w
    return SmoothPrediction(mean, max(float(var), 0.0), w, float(dl @ delta))


def predict_uncertain_input(
    field: GpField,
    mu_z: float,
    var_z: float,
    i_now: float,
    values: np.ndarray,
    value_var: np.ndarray,
    noise_mean: float = 0.0,
    noise_var: float = 0.0,
) -> tuple[float, float]:
    """Mean and variance of the field (smooth part plus noise channel)."""
    if var_z < 0:
        raise ValueError(f"negative SOC variance {var_z}")
    if field.wv is None:
        return noise_mean, noise_var
    if not field.grid.dims:
        return float(values[0]) + noise_mean, float(value_var[0]) + noise_var
    pred = smooth_prediction(field, mu_z, var_z, i_now, values, value_var)
    return pred.mean + noise_mean, pred.var + noise_var


def query_weights(field: GpField, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Kriging weights ``k(X*, U) K_uu^-1`` and the interpolation variance at ``X*``.

    Used to read a posterior over the grid values out at arbitrary operating
    points; the result is linear in the grid state.
    """
    if not field.grid.dims:
        m = np.atleast_2d(points).shape[0]
        return np.ones((m, 1)), np.zeros(m)
    X = np.asarray(points, dtype=float).reshape(-1, len(field.grid.dims))
    k = se_gram(X, field.grid.coords, field.se)
    cho = jittered_cholesky(field.gram())
    W = linalg.cho_solve(cho, k.T, check_finite=False).T
    interp = field.se.magnitude_sq - np.einsum("ij,ij->i", W, k)
    return W, np.maximum(interp, 0.0)


# ---------------------------------------------------------------------------
# Batch GP oracles


@dataclass
class BatchGp:
    """Dense GP regression problem.

    ``kernel(A, B)`` returns the Gram matrix between input arrays.
    """

    X: np.ndarray
    y: np.ndarray
    kernel: Callable[[np.ndarray, np.ndarray], np.ndarray]
    noise_sq: float

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float).ravel()
        if len(self.X) != len(self.y):
            raise ValueError("X and y have different lengths")


def _batch_factor(b: BatchGp):
    Ky = b.kernel(b.X, b.X) + b.noise_sq * np.eye(len(b.y))
    try:
        return linalg.cho_factor(Ky, lower=True)
    except linalg.LinAlgError as exc:
        raise ConditioningError(f"singular batch system ({exc})") from exc


def batch_gp_posterior(b: BatchGp, x_star) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and marginal variance of the latent function at ``x_star``."""
    x_star = np.asarray(x_star, dtype=float)
    kss = np.diag(b.kernel(x_star, x_star)).copy()
    if len(b.y) == 0:
        return np.zeros(len(x_star)), kss
    cho = _batch_factor(b)
    ks = b.kernel(x_star, b.X)
    mean = ks @ linalg.cho_solve(cho, b.y)
    var = kss - np.einsum("ij,ji->i", ks, linalg.cho_solve(cho, ks.T))
    return mean, var


def batch_nlml(b: BatchGp) -> float:
    """Negative log marginal likelihood of the data under the GP."""
    n = len(b.y)
    if n == 0:
        return 0.0
    cho = _batch_factor(b)
    alpha = linalg.cho_solve(cho, b.y)
    logdet = 2.0 * np.sum(np.log(np.diag(cho[0])))
    return float(0.5 * b.y @ alpha + 0.5 * logdet + 0.5 * n * np.log(2 * np.pi))
