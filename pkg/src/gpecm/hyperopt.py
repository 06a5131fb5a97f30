"""Maximum-likelihood hyperparameters for the joint estimator.

Twelve free hyperparameters are split in two groups.  The operating-point
group (SE magnitudes and inverse length scales plus the two measurement noise
levels) is fitted on the first cycle of each cell with the lifetime kernels
frozen.  The lifetime group (two WV magnitudes and the exponential kernel) is
then fitted on all cycles with the first group held fixed.

Optimisation works on ``log10`` of each parameter inside a box, with scipy's
L-BFGS-B and central finite-difference gradients.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import optimize

from . import battery_model as bm
from .gp_field import ConditioningError, GpField, GpSubsystem, Grid
from .joint_ekf import EcmModel, run_lifetime
from .kernels import ExpKernelParams, SeKernelParams, WvKernelParams

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_OFFSETS = {"q_inv": 1.09, "alpha": 0.01, "beta": 0.0007, "r0": 0.04}
STAGE1_NAMES = ("sigma_q", "sigma_ab", "sigma_r0", "gamma_ab_z", "gamma_r0_z", "gamma_r0_i", "noise_v", "noise_t")
STAGE2_NAMES = ("sigma_zeta0", "sigma_zeta1", "sigma_r", "gamma_r")
ALL_NAMES = STAGE1_NAMES + STAGE2_NAMES
# lifetime kernels while fitting one cycle: Delta zeta is zero there, so the WV
# scale is irrelevant and a small noise channel keeps it out of the way
STAGE1_PLACEHOLDERS = {"sigma_zeta0": 1e-4, "sigma_zeta1": 1e-4, "sigma_r": 1e-3, "gamma_r": 1.0}


@dataclass(frozen=True)
class HyperParams:
    """All kernel and noise hyperparameters.

    ``sigma_*`` are standard deviations (kernel magnitude is the square);
    ``gamma_*`` are inverse squared length scales.  ``alpha`` and ``beta``
    share one SE magnitude and one SOC length scale.  ``sigma_zeta0`` drives
    the WV kernel of ``q_inv``; ``sigma_zeta1`` that of the other three
    fields.  The exponential kernel is shared by all fields.
    """

    sigma_q: float = 0.05
    sigma_ab: float = 0.5
    sigma_r0: float = 0.3
    gamma_ab_z: float = 10.0
    gamma_r0_z: float = 10.0
    gamma_r0_i: float = 0.3
    noise_v: float = 0.01
    noise_t: float = 0.1
    sigma_zeta0: float = 1e-4
    sigma_zeta1: float = 1e-4
    sigma_r: float = 1e-3
    gamma_r: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"hyperparameter {f.name} must be positive and finite, got {v!r}")

    def log10_vector(self, names: Sequence[str] = ALL_NAMES) -> np.ndarray:
        return np.log10([getattr(self, n) for n in names])

    def with_log10(self, names: Sequence[str], u) -> "HyperParams":
        return replace(self, **{n: float(10.0 ** x) for n, x in zip(names, u)})

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "HyperParams":
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported hyperparameter schema_version {version}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"schema_version"}
        if unknown:
            raise ValueError(f"unknown hyperparameters {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items() if k in known})


@dataclass(frozen=True)
class Box:
    """Bounds in ``log10`` space per hyperparameter."""

    lower: Mapping[str, float]
    upper: Mapping[str, float]

    def __post_init__(self):
        for n in ALL_NAMES:
            if not self.lower[n] < self.upper[n]:
                raise ValueError(f"box for {n} is empty")

    @classmethod
    def default(cls) -> "Box":
        lo, hi = {}, {}
        for n in ("sigma_q", "sigma_ab", "sigma_r0", "sigma_r"):
            lo[n], hi[n] = -3.0, 1.0
        # zeta is in Ah, so relative drift rates are small per unit zeta
        for n in ("sigma_zeta0", "sigma_zeta1"):
            lo[n], hi[n] = -6.0, -1.0
        for n in ("gamma_ab_z", "gamma_r0_z", "gamma_r0_i", "gamma_r"):
            lo[n], hi[n] = -2.0, 3.0
        lo["noise_v"], hi["noise_v"] = -4.0, -1.0
        lo["noise_t"], hi["noise_t"] = -2.0, 0.0
        return cls(lo, hi)

    def bounds(self, names: Sequence[str]) -> list[tuple[float, float]]:
        return [(self.lower[n], self.upper[n]) for n in names]

    def arrays(self, names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        b = np.array(self.bounds(names))
        return b[:, 0], b[:, 1]

    def contains(self, theta: HyperParams, names: Sequence[str] = ALL_NAMES, tol: float = 1e-12) -> bool:
        u = theta.log10_vector(names)
        lo, hi = self.arrays(names)
        return bool(np.all(u >= lo - tol) and np.all(u <= hi + tol))

    def to_dict(self) -> dict:
        return {"lower": dict(self.lower), "upper": dict(self.upper)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Box":
        base = cls.default()
        lo = {**base.lower, **d.get("lower", {})}
        hi = {**base.upper, **d.get("upper", {})}
        return cls(lo, hi)


@dataclass(frozen=True)
class ModelSpec:
    """Everything except hyperparameters needed to build the filter model."""

    z_range: tuple[float, float]
    i_range: tuple[float, float]
    ocv: bm.OcvCurve
    thermal: bm.ThermalParams
    n_z: int = 6
    n_r0_z: int = 4
    n_r0_i: int = 15
    offsets: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_OFFSETS))
    q_batt: tuple = (1e-12, 1e-6, 1e-4)
    p_batt0: tuple = (1e-4, 1e-6, 1e-2)
    use_lambda: bool = True

    def __post_init__(self):
        if min(self.n_z, self.n_r0_z, self.n_r0_i) < 2:
            raise ValueError("grid sizes must be at least 2 per dimension")
        if not (self.z_range[0] < self.z_range[1] and self.i_range[0] < self.i_range[1]):
            raise ValueError("grid ranges must be increasing")


def build_subsystem(theta: HyperParams, spec: ModelSpec) -> GpSubsystem:
    """Discretised GP fields for ``q_inv``, ``alpha``, ``beta`` and ``r0``.

    Each WV kernel's ``zeta0`` is re-solved so that every field's prior
    variance at beginning of life equals its SE magnitude.
    """
    ex = ExpKernelParams(theta.sigma_r**2, theta.gamma_r)
    sz0, sz1 = theta.sigma_zeta0**2, theta.sigma_zeta1**2
    soc = Grid.soc(spec.z_range, spec.n_z)
    s_q = SeKernelParams(theta.sigma_q**2)
    s_ab = SeKernelParams(theta.sigma_ab**2, {"z": theta.gamma_ab_z})
    s_r0 = SeKernelParams(theta.sigma_r0**2, {"z": theta.gamma_r0_z, "I": theta.gamma_r0_i})
    return GpSubsystem([
        GpField("q_inv", Grid.constant(), s_q, WvKernelParams.truncated(sz0, s_q.magnitude_sq), ex),
        GpField("alpha", soc, s_ab, WvKernelParams.truncated(sz1, s_ab.magnitude_sq), ex),
        GpField("beta", soc, s_ab, WvKernelParams.truncated(sz1, s_ab.magnitude_sq), ex),
        GpField(
            "r0",
            Grid.soc_current(spec.z_range, spec.n_r0_z, spec.i_range, spec.n_r0_i),
            s_r0,
            WvKernelParams.truncated(sz1, s_r0.magnitude_sq),
            ex,
        ),
    ])


def build_model(theta: HyperParams, spec: ModelSpec, zeta_origin: float | None = 0.0) -> EcmModel:
    return EcmModel(
        gp=build_subsystem(theta, spec),
        offsets=dict(spec.offsets),
        ocv=spec.ocv,
        thermal=spec.thermal,
        noise_v=theta.noise_v,
        noise_t=theta.noise_t,
        q_batt=tuple(spec.q_batt),
        p_batt0=tuple(spec.p_batt0),
        zeta_origin=zeta_origin,
        use_lambda=spec.use_lambda,
    )


def nlml(
    theta: HyperParams,
    cells: Sequence[Sequence],
    spec: ModelSpec,
    zeta_origin: float | None = 0.0,
) -> float:
    """Summed negative log marginal likelihood over cells; ``inf`` if the filter fails."""
    model = build_model(theta, spec, zeta_origin)
    total = 0.0
    for c, segs in enumerate(cells):
        try:
            with np.errstate(all="raise"):
                phi = run_lifetime(segs, model).phi_total
        except (ConditioningError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
            log.debug("nlml failed on cell %d: %s", c, exc)
            return math.inf
        if not math.isfinite(phi):
            return math.inf
        total += phi
    return total


class FitLog:
    """Line-delimited JSON records of objective evaluations; ``path=None`` keeps them in memory only."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.write_text("", encoding="utf-8")

    def write(self, **rec):
        self.records.append(rec)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


class OutOfBoxError(AssertionError):
    pass


class Objective:
    """``log10``-space NLML over a subset of hyperparameters, with caching."""

    def __init__(
        self,
        cells: Sequence[Sequence],
        spec: ModelSpec,
        names: Sequence[str],
        base: HyperParams,
        box: Box,
        zeta_origin: float | None = 0.0,
        fit_log: FitLog | None = None,
        stage: int = 0,
    ):
        self.cells = cells
        self.spec = spec
        self.names = tuple(names)
        self.base = base
        self.box = box
        self.lo, self.hi = box.arrays(self.names)
        self.zeta_origin = zeta_origin
        self.log = fit_log or FitLog()
        self.stage = stage
        self.n_evals = 0
        self._cache: dict[tuple, float] = {}

    def theta(self, u) -> HyperParams:
        return self.base.with_log10(self.names, u)

    def __call__(self, u) -> float:
        u = np.asarray(u, dtype=float)
        if np.any(u < self.lo - 1e-12) or np.any(u > self.hi + 1e-12):
            raise OutOfBoxError(f"objective evaluated outside the box at {u}")
        key = tuple(np.round(u, 14))
        if key not in self._cache:
            self._cache[key] = nlml(self.theta(u), self.cells, self.spec, self.zeta_origin)
            self.n_evals += 1
        return self._cache[key]

    def gradient(self, u, step: float = 1e-4, scheme: str = "central") -> np.ndarray:
        return nlml_gradient(self, u, step, scheme)


class NonFiniteObjective(FloatingPointError):
    pass


def nlml_gradient(obj: Objective, u, step: float = 1e-4, scheme: str = "central") -> np.ndarray:
    """Finite-difference gradient in ``log10`` space.

    Central differences by default; a coordinate within ``step`` of a bound
    falls back to the one-sided stencil that stays inside the box.
    """
    u = np.asarray(u, dtype=float)
    g = np.empty_like(u)
    f0 = None
    for k in range(len(u)):
        up, dn = u.copy(), u.copy()
        up[k] += step
        dn[k] -= step
        can_up = up[k] <= obj.hi[k]
        can_dn = dn[k] >= obj.lo[k]
        if scheme == "central" and can_up and can_dn:
            fp, fm = obj(up), obj(dn)
            g[k] = (fp - fm) / (2 * step)
        else:
            if f0 is None:
                f0 = obj(u)
            if (scheme != "backward" and can_up) or not can_dn:
                fp = obj(up)
                g[k] = (fp - f0) / step
                fm = f0
            else:
                fm = obj(dn)
                g[k] = (f0 - fm) / step
                fp = f0
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteObjective(f"non-finite objective near coordinate {obj.names[k]}")
    return g


@dataclass
class FitResult:
    theta: HyperParams
    phi: float
    names: tuple
    starts: list = field(default_factory=list)
    n_evals: int = 0
    at_bounds: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "hyperparameters": self.theta.to_dict(),
            "phi": self.phi,
            "fitted": list(self.names),
            "n_evals": self.n_evals,
            "at_bounds": list(self.at_bounds),
        }


_PENALTY = 1e12


def _refine(obj: Objective, u0, maxiter: int, step: float) -> tuple[np.ndarray, float]:
    """L-BFGS-B from ``u0``; failed evaluations become a flat penalty so the line search backs off."""

    def fun(u):
        u = np.clip(u, obj.lo, obj.hi)
        f = obj(u)
        if not math.isfinite(f):
            return _PENALTY, np.zeros_like(u)
        try:
            g = obj.gradient(u, step)
        except NonFiniteObjective:
            return _PENALTY, np.zeros_like(u)
        return f, g

    it = [0]

    def callback(intermediate_result):
        it[0] += 1
        obj.log.write(stage=obj.stage, phase="refine", iteration=it[0], phi=float(intermediate_result.fun),
                      theta=dict(zip(obj.names, map(float, intermediate_result.x))))

    res = optimize.minimize(
        fun, np.asarray(u0, dtype=float), jac=True, method="L-BFGS-B",
        bounds=list(zip(obj.lo, obj.hi)), callback=callback,
        options={"maxiter": maxiter, "ftol": 1e-6, "gtol": 1e-4},
    )
    u = np.clip(res.x, obj.lo, obj.hi)
    return u, obj(u)


def _bound_hits(obj: Objective, u, tol: float = 1e-6) -> list[str]:
    return [n for n, x, lo, hi in zip(obj.names, u, obj.lo, obj.hi) if x - lo < tol or hi - x < tol]


class FitFailed(RuntimeError):
    pass


def fit_stage1(
    first_cycles: Sequence,
    spec: ModelSpec,
    seed: int = 0,
    n_random: int = 1000,
    n_refine: int = 25,
    box: Box | None = None,
    fit_log: FitLog | None = None,
    maxiter: int = 500,
    step: float = 1e-4,
) -> FitResult:
    """Operating-point hyperparameters from the first cycle of each cell.

    ``first_cycles`` holds one segment per cell.  Random starts are drawn
    log-uniform in the box; the ``n_refine`` best are refined and the best
    optimum returned.
    """
    box = box or Box.default()
    base = HyperParams(**{**asdict(HyperParams()), **STAGE1_PLACEHOLDERS})
    cells = [[seg] for seg in first_cycles]
    obj = Objective(cells, spec, STAGE1_NAMES, base, box, zeta_origin=None, fit_log=fit_log, stage=1)
    rng = np.random.default_rng(seed)
    U = obj.lo + (obj.hi - obj.lo) * rng.random((n_random, len(STAGE1_NAMES)))
    phis = np.array([obj(u) for u in U])
    for k, (u, f) in enumerate(zip(U, phis)):
        obj.log.write(stage=1, phase="random", index=k, phi=float(f) if math.isfinite(f) else None,
                      theta=dict(zip(STAGE1_NAMES, map(float, u))))
    finite = np.flatnonzero(np.isfinite(phis))
    if not len(finite):
        raise FitFailed(f"all {n_random} random starts failed")
    order = finite[np.argsort(phis[finite], kind="stable")][:n_refine]
    starts = []
    best_u, best_f = U[order[0]], float(phis[order[0]])
    for k in order:
        u, f = _refine(obj, U[k], maxiter, step)
        starts.append({"start": U[k].tolist(), "phi_start": float(phis[k]), "end": u.tolist(), "phi_end": float(f)})
        if f < best_f:
            best_u, best_f = u, f
    return FitResult(obj.theta(best_u), best_f, STAGE1_NAMES, starts, obj.n_evals, _bound_hits(obj, best_u))


def default_lattice(box: Box, n: int = 3) -> dict:
    """``n`` evenly spaced interior ``log10`` values per stage-2 parameter."""
    out = {}
    for name in STAGE2_NAMES:
        lo, hi = box.lower[name], box.upper[name]
        out[name] = list(lo + (hi - lo) * (np.arange(n) + 0.5) / n)
    return out


def fit_stage2(
    cells: Sequence[Sequence],
    theta_x: HyperParams,
    spec: ModelSpec,
    lattice: Mapping[str, Sequence[float]] | None = None,
    box: Box | None = None,
    fit_log: FitLog | None = None,
    maxiter: int = 500,
    step: float = 1e-4,
    zeta_origin: float = 0.0,
) -> FitResult:
    """Lifetime hyperparameters on all cycles with the operating-point group fixed.

    A grid search over ``lattice`` (``log10`` values per parameter) picks the
    single start for L-BFGS-B.  Parameters that finish on a bound are listed
    in ``at_bounds``.  With a single cycle per cell the WV scales do not
    enter the likelihood and stay where the lattice put them.
    """
    box = box or Box.default()
    lattice = lattice or default_lattice(box)
    obj = Objective(cells, spec, STAGE2_NAMES, theta_x, box, zeta_origin, fit_log, stage=2)
    axes = [np.asarray(lattice[n], dtype=float) for n in STAGE2_NAMES]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(STAGE2_NAMES))
    phis = np.array([obj(u) for u in grid])
    for k, (u, f) in enumerate(zip(grid, phis)):
        obj.log.write(stage=2, phase="grid", index=k, phi=float(f) if math.isfinite(f) else None,
                      theta=dict(zip(STAGE2_NAMES, map(float, u))))
    if not np.any(np.isfinite(phis)):
        raise FitFailed("every lattice point failed")
    k0 = int(np.nanargmin(np.where(np.isfinite(phis), phis, np.nan)))
    u, f = _refine(obj, grid[k0], maxiter, step)
    if not f <= phis[k0]:
        u, f = grid[k0], float(phis[k0])
    starts = [{"start": grid[k0].tolist(), "phi_start": float(phis[k0]), "end": u.tolist(), "phi_end": float(f)}]
    return FitResult(obj.theta(u), float(f), STAGE2_NAMES, starts, obj.n_evals, _bound_hits(obj, u))


def data_ranges(segments: Iterable, ocv: bm.OcvCurve, q_nominal: float, margin: float = 0.02):
    """SOC and current ranges covered by the data, for placing the grids.

    SOC is estimated by coulomb counting from the OCV of each segment's first
    voltage with nominal capacity ``q_nominal`` (Ah).
    """
    z_lo, z_hi, i_lo, i_hi = math.inf, -math.inf, math.inf, -math.inf
    for seg in segments:
        z0 = ocv.inverse(float(seg.v[0]))
        dq = np.concatenate([[0.0], np.cumsum(seg.i[:-1] * np.diff(seg.t))]) / bm.SECONDS_PER_HOUR
        z = z0 + dq / q_nominal
        z_lo, z_hi = min(z_lo, z.min()), max(z_hi, z.max())
        i_lo, i_hi = min(i_lo, seg.i.min()), max(i_hi, seg.i.max())
    return (max(z_lo - margin, 0.0), min(z_hi + margin, 1.0)), (float(i_lo), float(i_hi))
