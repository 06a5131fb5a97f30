"""Joint battery-state / parameter-GP extended Kalman filter over a lifetime.

The joint state is ``[z, v1, tc | GP subsystem]``.  Between segments (discharge
cycles) only the GP subsystem moves, exactly and linearly, by the lifetime
step.  Within a segment the GP states are frozen and the battery states are
filtered at the sample rate with an EKF; the negative log marginal likelihood
is accumulated from the innovations.  After the pass, a Rauch-Tung-Striebel
smoother runs backwards over the per-segment GP checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Protocol, Sequence

import numpy as np
from scipy import linalg

from . import battery_model as bm
from .gp_field import (
    ConditioningError,
    GpField,
    GpSubsystem,
    query_weights,
    smooth_prediction,
)

LOG_2PI = math.log(2.0 * math.pi)
N_BATT = 3
FLOOR_FRACTION = 0.01
FIELD_NAMES = ("q_inv", "alpha", "beta", "r0")


class Sample(NamedTuple):
    i: float
    v: float
    temp: float
    t_amb: float


@dataclass(frozen=True)
class IndexMap:
    """Positions of named blocks inside a joint state vector."""

    dim: int
    values: dict
    noise: dict
    derivs: dict
    gp_start: int = N_BATT

    @classmethod
    def full(cls, gp: GpSubsystem) -> "IndexMap":
        off = N_BATT
        values = {f.name: off + gp.value_index(f.name) for f in gp.fields}
        derivs = {f.name: off + gp.deriv_index(f.name) for f in gp.fields}
        noise = {
            f.name: (None if gp.noise_index(f.name) is None else off + gp.noise_index(f.name))
            for f in gp.fields
        }
        return cls(N_BATT + gp.dim, values, noise, derivs)

    @classmethod
    def reduced(cls, gp: GpSubsystem) -> tuple["IndexMap", np.ndarray]:
        """Layout without derivative states, plus the GP-subsystem indices it keeps."""
        keep = []
        for f in gp.fields:
            keep.extend(gp.value_index(f.name))
        for f in gp.fields:
            if gp.noise_index(f.name) is not None:
                keep.append(gp.noise_index(f.name))
        keep = np.array(keep, dtype=int)
        pos = {int(k): N_BATT + j for j, k in enumerate(keep)}
        values = {f.name: np.array([pos[int(k)] for k in gp.value_index(f.name)], dtype=int) for f in gp.fields}
        noise = {
            f.name: (None if gp.noise_index(f.name) is None else pos[gp.noise_index(f.name)])
            for f in gp.fields
        }
        derivs = {f.name: np.zeros(0, dtype=int) for f in gp.fields}
        return cls(N_BATT + len(keep), values, noise, derivs), keep


@dataclass
class JointState:
    mean: np.ndarray
    cov: np.ndarray
    index: IndexMap

    @property
    def battery(self) -> bm.BatteryState:
        return bm.BatteryState.from_array(self.mean[:N_BATT])

    def gp_block(self) -> tuple[np.ndarray, np.ndarray]:
        s = slice(self.index.gp_start, self.index.dim)
        return self.mean[s], self.cov[s, s]


@dataclass
class EcmModel:
    """Everything the joint filter needs apart from the data.

    ``gp`` must contain fields named ``q_inv``, ``alpha``, ``beta`` and ``r0``;
    ``offsets`` are the affine constants ``c_f`` in physical units.
    """

    gp: GpSubsystem
    offsets: dict
    ocv: bm.OcvCurve
    thermal: bm.ThermalParams
    noise_v: float
    noise_t: float
    q_batt: tuple = (1e-12, 1e-6, 1e-4)
    p_batt0: tuple = (1e-4, 1e-6, 1e-2)
    zeta_origin: float | None = 0.0
    use_lambda: bool = True

    def __post_init__(self):
        missing = [n for n in FIELD_NAMES if n not in {f.name for f in self.gp.fields}]
        if missing:
            raise ValueError(f"GP subsystem lacks fields {missing}")

    @property
    def measurement_cov(self) -> np.ndarray:
        return np.diag([self.noise_v**2, self.noise_t**2])

    def filter_segment(self, gp_mean, gp_cov, segment, diagnostics=None):
        return filter_ecm_segment(self, gp_mean, gp_cov, segment, diagnostics)


@dataclass
class Diagnostics:
    floors: int = 0
    soc_clamps: int = 0
    max_asymmetry: float = 0.0
    min_diag_ratio: float = 0.0

    def check_cov(self, P: np.ndarray):
        scale = np.max(np.abs(P))
        if scale > 0:
            self.max_asymmetry = max(self.max_asymmetry, float(np.max(np.abs(P - P.T)) / scale))
        tr = np.trace(P)
        if tr > 0:
            self.min_diag_ratio = min(self.min_diag_ratio, float(np.min(np.diag(P)) / tr))


@dataclass
class SegmentResult:
    residuals: np.ndarray
    innovation_covs: np.ndarray
    battery_states: np.ndarray
    phi: float


@dataclass
class FilterCheckpoint:
    zeta: float
    pre_gp_mean: np.ndarray
    pre_gp_cov: np.ndarray
    post_gp_mean: np.ndarray
    post_gp_cov: np.ndarray
    transition_used: np.ndarray


# ---------------------------------------------------------------------------
# Parameter predictions and their gradients


def field_linearization(
    model: EcmModel,
    name: str,
    state: JointState,
    mu_z: float,
    var_z: float,
    i_now: float,
    floor: bool,
) -> bm.ParamLinearization:
    """Physical parameter mean, GP predictive variance and gradient wrt the state."""
    f = model.gp[name]
    c = model.offsets[name]
    x, P, ix = state.mean, state.cov, state.index
    grad = np.zeros(ix.dim)
    vidx = ix.values[name]
    nidx = ix.noise[name]
    gp_mean, gp_var = 0.0, 0.0
    if len(vidx):
        if f.grid.dims:
            pred = smooth_prediction(f, mu_z, var_z, i_now, x[vidx], np.diag(P)[vidx])
            gp_mean, gp_var = pred.mean, pred.var
            grad[vidx] = c * pred.weights
            grad[0] += c * pred.dmean_dz
        else:
            gp_mean = float(x[vidx[0]])
            grad[vidx[0]] = c
    if nidx is not None:
        gp_mean += float(x[nidx])
        grad[nidx] = c
    value = c * (1.0 + gp_mean)
    if floor and value < FLOOR_FRACTION * c:
        return bm.ParamLinearization(FLOOR_FRACTION * c, c * c * gp_var, np.zeros(ix.dim), True)
    return bm.ParamLinearization(value, c * c * gp_var, grad)


def _params_at(model, state, mu_z, var_z, i_now):
    return {
        "q_inv": field_linearization(model, "q_inv", state, mu_z, var_z, i_now, True),
        "alpha": field_linearization(model, "alpha", state, mu_z, var_z, i_now, True),
        "beta": field_linearization(model, "beta", state, mu_z, var_z, i_now, False),
        "r0": field_linearization(model, "r0", state, mu_z, var_z, i_now, False),
    }


# ---------------------------------------------------------------------------
# Initialisation


def _battery_prior(model: EcmModel, first: Sample) -> tuple[np.ndarray, np.ndarray]:
    z0 = model.ocv.inverse(first.v, strict=True)
    return np.array([z0, 0.0, first.t_amb]), np.diag(model.p_batt0)


def init_joint(model: EcmModel, first: Sample, index: IndexMap | None = None) -> JointState:
    """Battery prior from a rest voltage, GP prior at beginning of life."""
    index = index or IndexMap.full(model.gp)
    xb, Pb = _battery_prior(model, first)
    if index.dim != N_BATT + model.gp.dim:
        raise ValueError("init_joint builds the full layout only")
    mean = np.concatenate([xb, model.gp.initial_mean()])
    cov = linalg.block_diag(Pb, model.gp.initial_cov())
    return JointState(mean, cov, index)


def begin_segment(
    model: EcmModel, state: JointState, delta_zeta: float, first: Sample
) -> JointState:
    """Re-initialise the battery block and move the GP block by ``delta_zeta``."""
    gm, gP = state.gp_block()
    gm, gP, _ = model.gp.propagate(gm, gP, delta_zeta)
    xb, Pb = _battery_prior(model, first)
    return JointState(np.concatenate([xb, gm]), linalg.block_diag(Pb, gP), state.index)


# ---------------------------------------------------------------------------
# One EKF step


def _propagate(model: EcmModel, state: JointState, i_prev: float, t_amb_prev: float, dt: float, diag: Diagnostics):
    x, P = state.mean, state.cov
    s = bm.BatteryState.from_array(x)
    params = _params_at(model, state, s.z, P[0, 0], i_prev)
    diag.floors += sum(p.floored for p in params.values())
    snap = bm.EcmParamSnapshot(params["q_inv"].value, params["alpha"].value, params["beta"].value, params["r0"].value)
    nxt = bm.step_dynamics(s, i_prev, t_amb_prev, dt, snap, model.thermal)
    Gb = bm.dynamics_jacobian(
        s, i_prev, dt, params["q_inv"], params["alpha"], params["beta"], params["r0"], model.thermal
    )
    x_new = x.copy()
    x_new[:N_BATT] = nxt.as_array()
    # G differs from identity only in the battery rows
    M = P.copy()
    M[:N_BATT] = Gb @ P
    P_new = M.copy()
    P_new[:, :N_BATT] = M @ Gb.T
    P_new[np.arange(N_BATT), np.arange(N_BATT)] += model.q_batt
    if model.use_lambda:
        lam, _ = bm.lambda_terms(
            s, i_prev, dt, params["alpha"].value, params["alpha"].var, params["beta"].var, params["r0"].var,
            model.thermal,
        )
        P_new[:N_BATT, :N_BATT] += lam
    return JointState(x_new, 0.5 * (P_new + P_new.T), state.index)


def _update(model: EcmModel, state: JointState, sample: Sample, diag: Diagnostics):
    x, P = state.mean, state.cov
    s = bm.BatteryState.from_array(x)
    r0 = field_linearization(model, "r0", state, s.z, P[0, 0], sample.i, False)
    v_hat = float(model.ocv(s.z)) + s.v1 + r0.value * sample.i
    e = np.array([sample.v - v_hat, sample.temp - s.tc])
    H = bm.observation_jacobian(s, sample.i, r0, model.ocv)
    R = model.measurement_cov
    if model.use_lambda:
        R = R.copy()
        R[0, 0] += r0.var * sample.i**2
    PHt = P @ H.T
    S = H @ PHt + R
    S = 0.5 * (S + S.T)
    try:
        cS = linalg.cho_factor(S, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise ConditioningError(f"innovation covariance not positive definite: {S}") from exc
    K = linalg.cho_solve(cS, PHt.T, check_finite=False).T
    x_new = x + K @ e
    # Joseph form, expanded: (I-KH)P(I-KH)' + KRK' = P - K PHt' - PHt K' + K S K'
    KPHt = K @ PHt.T
    P_new = P - KPHt - KPHt.T + K @ S @ K.T
    P_new = 0.5 * (P_new + P_new.T)
    if not (bm.Z_CLAMP[0] <= x_new[0] <= bm.Z_CLAMP[1]):
        x_new[0] = min(max(x_new[0], bm.Z_CLAMP[0]), bm.Z_CLAMP[1])
        diag.soc_clamps += 1
    alpha_vec = linalg.cho_solve(cS, e, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(cS[0])))
    phi = 0.5 * float(e @ alpha_vec) + 0.5 * (logdet + 2 * LOG_2PI)
    return JointState(x_new, P_new, state.index), e, S, phi


def ekf_step(
    model: EcmModel,
    state: JointState,
    sample: Sample,
    dt: float | None,
    prev: Sample | None = None,
    diagnostics: Diagnostics | None = None,
):
    """Propagate from ``prev`` over ``dt`` seconds (skipped when ``dt`` is None), then update.

    Returns ``(state, residual, S, phi_increment)``.
    """
    diag = diagnostics if diagnostics is not None else Diagnostics()
    if dt is not None:
        if not dt > 0:
            raise ValueError("dt must be positive")
        state = _propagate(model, state, prev.i, prev.t_amb, dt, diag)
    return _update(model, state, sample, diag)


# ---------------------------------------------------------------------------
# Segment and lifetime passes


def _field_pack(model: EcmModel, name: str, index: IndexMap, floor: bool) -> tuple:
    f = model.gp[name]
    vidx = np.asarray(index.values[name], dtype=np.int64)
    nidx = -1 if index.noise[name] is None else int(index.noise[name])
    has_z = "z" in f.grid.dims
    has_i = "I" in f.grid.dims
    n = len(vidx)
    uz = f.grid.column("z") if has_z else np.zeros(n)
    ui = f.grid.column("I") if has_i else np.zeros(n)
    zu, zgrp = np.unique(uz, return_inverse=True)
    gz = f.se.inv_lengthscales.get("z", 0.0)
    gi = f.se.inv_lengthscales.get("I", 0.0)
    kuu = f.gram() if n else np.zeros((0, 0))
    return (
        vidx, nidx, np.ascontiguousarray(uz, dtype=float), np.ascontiguousarray(ui, dtype=float),
        zu.astype(float), zgrp.astype(np.int64).ravel(), has_z, has_i, float(gz), float(gi),
        float(f.se.magnitude_sq), float(model.offsets[name]), floor, np.ascontiguousarray(kuu),
    )


def _run_compiled(model: EcmModel, state: JointState, segment, diag: Diagnostics):
    from . import _fastfilter

    x = state.mean.copy()
    P = np.ascontiguousarray(state.cov.copy())
    ocv = model.ocv.ppoly
    packs = [_field_pack(model, n, state.index, n in ("q_inv", "alpha")) for n in FIELD_NAMES]
    res, S_all, batt, phi, floors, clamps, failed = _fastfilter.run_segment(
        x, P, np.asarray(segment.t, dtype=float), np.asarray(segment.i, dtype=float),
        np.asarray(segment.v, dtype=float), np.asarray(segment.temp, dtype=float),
        np.asarray(segment.t_amb, dtype=float), *packs,
        np.ascontiguousarray(ocv.c), np.ascontiguousarray(ocv.x),
        float(model.thermal.r_c), float(model.thermal.c_c),
        float(model.noise_v**2), float(model.noise_t**2), np.asarray(model.q_batt, dtype=float),
        bool(model.use_lambda), float(bm.Z_CLAMP[0]), float(bm.Z_CLAMP[1]),
    )
    if failed >= 0:
        raise ConditioningError(f"covariance not positive definite at sample {failed}")
    diag.floors += int(floors)
    diag.soc_clamps += int(clamps)
    return JointState(x, P, state.index), res, S_all, batt, float(phi)


def _segment_samples(segment) -> list[Sample]:
    return [Sample(float(a), float(b), float(c), float(d)) for a, b, c, d in
            zip(segment.i, segment.v, segment.temp, segment.t_amb)]


def _lift(gm_pre, gP_pre, keep, am_post, aP_post):
    """Posterior of the whole GP block from the posterior of its kept states.

    States that are dropped (WV derivatives) never enter the segment's
    dynamics or observations, so they are conditionally independent of the
    data given the kept states.
    """
    n = len(gm_pre)
    drop = np.setdiff1d(np.arange(n), keep)
    m = gm_pre.copy()
    P = gP_pre.copy()
    m[keep] = am_post
    P[np.ix_(keep, keep)] = aP_post
    if len(drop):
        Paa = gP_pre[np.ix_(keep, keep)]
        Pda = gP_pre[np.ix_(drop, keep)]
        J = linalg.lstsq(Paa, Pda.T, cond=1e-13, check_finite=False)[0].T
        m[drop] = gm_pre[drop] + J @ (am_post - gm_pre[keep])
        Pdd = gP_pre[np.ix_(drop, drop)] + J @ (aP_post - Paa) @ J.T
        P[np.ix_(drop, drop)] = Pdd
        cross = J @ aP_post
        P[np.ix_(drop, keep)] = cross
        P[np.ix_(keep, drop)] = cross.T
    return m, 0.5 * (P + P.T)


def filter_ecm_segment(model: EcmModel, gm, gP, segment, diagnostics=None, reduced=True, compiled=True):
    """Run the EKF over one segment starting from the GP prior ``(gm, gP)``.

    ``reduced`` drops the WV derivative states while filtering and restores
    them afterwards; ``compiled`` uses the numba loop instead of repeated
    :func:`ekf_step` calls.  Returns the GP posterior and a
    :class:`SegmentResult`.
    """
    diag = diagnostics if diagnostics is not None else Diagnostics()
    samples = _segment_samples(segment)
    t = np.asarray(segment.t, dtype=float)
    xb, Pb = _battery_prior(model, samples[0])
    if reduced:
        index, keep = IndexMap.reduced(model.gp)
    else:
        index, keep = IndexMap.full(model.gp), np.arange(model.gp.dim)
    state = JointState(
        np.concatenate([xb, gm[keep]]),
        linalg.block_diag(Pb, gP[np.ix_(keep, keep)]),
        index,
    )
    if compiled:
        state, residuals, S_all, batt, phi = _run_compiled(model, state, segment, diag)
    else:
        n = len(samples)
        residuals = np.empty((n, 2))
        S_all = np.empty((n, 2, 2))
        batt = np.empty((n, N_BATT))
        phi = 0.0
        for k, smp in enumerate(samples):
            dt = None if k == 0 else t[k] - t[k - 1]
            state, e, S, dphi = ekf_step(model, state, smp, dt, samples[k - 1] if k else None, diag)
            residuals[k] = e
            S_all[k] = S
            batt[k] = state.mean[:N_BATT]
            phi += dphi
    diag.check_cov(state.cov)
    am = state.mean[N_BATT:]
    aP = state.cov[N_BATT:, N_BATT:]
    if reduced:
        post_m, post_P = _lift(gm, gP, keep, am, aP)
    else:
        post_m, post_P = am, 0.5 * (aP + aP.T)
    return post_m, post_P, SegmentResult(residuals, S_all, batt, phi)


class SegmentModel(Protocol):
    gp: GpSubsystem
    zeta_origin: float

    def filter_segment(self, gp_mean, gp_cov, segment, diagnostics=None): ...


@dataclass
class LifetimeResult:
    phi_total: float
    checkpoints: list
    segment_results: list
    diagnostics: Diagnostics = field(default_factory=Diagnostics)


def run_lifetime(segments: Sequence, model: SegmentModel) -> LifetimeResult:
    """Filter every segment in lifetime order, recording GP checkpoints."""
    diag = Diagnostics()
    gm = model.gp.initial_mean()
    gP = model.gp.initial_cov()
    zeta_prev = model.zeta_origin
    if zeta_prev is None:
        zeta_prev = float(segments[0].zeta) if len(segments) else 0.0
    phi = 0.0
    checkpoints, results = [], []
    for k, seg in enumerate(segments):
        dz = float(seg.zeta) - zeta_prev
        if dz < 0:
            raise ValueError(f"segment {k}: segments must be sorted by zeta")
        pre_m, pre_P, A = model.gp.propagate(gm, gP, dz)
        try:
            gm, gP, res = model.filter_segment(pre_m, pre_P, seg, diag)
        except ConditioningError as exc:
            raise ConditioningError(f"segment {k}: {exc}") from exc
        diag.check_cov(gP)
        checkpoints.append(FilterCheckpoint(float(seg.zeta), pre_m, pre_P, gm, gP, A))
        results.append(res)
        phi += res.phi
        zeta_prev = float(seg.zeta)
    return LifetimeResult(phi, checkpoints, results, diag)


# ---------------------------------------------------------------------------
# Pure-GP reduction: direct noisy observations of one field


class GpObservations(NamedTuple):
    zeta: float
    y: np.ndarray


@dataclass
class DirectGpModel:
    """One constant-over-operating-point field observed directly with noise.

    ``y = value + noise_channel + eps``; used to check the recursive machinery
    against dense GP regression.
    """

    gp: GpSubsystem
    noise_sq: float
    zeta_origin: float = 0.0

    def observation_row(self) -> np.ndarray:
        f = self.gp.fields[0]
        H = np.zeros(self.gp.dim)
        if f.wv is not None:
            H[self.gp.value_index(f.name)[0]] = 1.0
        if f.exp is not None:
            H[self.gp.noise_index(f.name)] = 1.0
        return H

    def filter_segment(self, gm, gP, segment, diagnostics=None):
        H = self.observation_row()
        m, P = gm.copy(), gP.copy()
        ys = np.atleast_1d(segment.y)
        res = np.empty((len(ys), 1))
        Ss = np.empty((len(ys), 1, 1))
        phi = 0.0
        for k, y in enumerate(ys):
            PHt = P @ H
            S = float(H @ PHt) + self.noise_sq
            K = PHt / S
            e = y - float(H @ m)
            m = m + K * e
            IKH = np.eye(len(m)) - np.outer(K, H)
            P = IKH @ P @ IKH.T + self.noise_sq * np.outer(K, K)
            P = 0.5 * (P + P.T)
            phi += 0.5 * e * e / S + 0.5 * math.log(2 * math.pi * S)
            res[k, 0] = e
            Ss[k, 0, 0] = S
        if diagnostics is not None:
            diagnostics.check_cov(P)
        return m, P, SegmentResult(res, Ss, np.zeros((len(ys), 0)), phi)


# ---------------------------------------------------------------------------
# Smoothing and forecasting


def _solve_psd(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``A^-1 B`` for symmetric PSD ``A``, tolerating rank deficiency."""
    try:
        c = linalg.cho_factor(A, lower=True, check_finite=False)
        X = linalg.cho_solve(c, B, check_finite=False)
        if np.all(np.isfinite(X)):
            return X
    except linalg.LinAlgError:
        pass
    return linalg.lstsq(A, B, cond=1e-13, check_finite=False)[0]


@dataclass
class SmoothedPosterior:
    """RTS-smoothed GP subsystem at each checkpoint."""

    gp: GpSubsystem
    zetas: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    offsets: dict | None = None
    checkpoints: list | None = None

    def at(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return self.means[k], self.covs[k]

    def query(self, k_or_state, name: str, points=None, include_noise: bool = False, physical: bool = True):
        """Mean and variance of field ``name`` at operating ``points``.

        ``k_or_state`` is a checkpoint index or an explicit ``(mean, cov)``.
        """
        m, P = self.at(k_or_state) if isinstance(k_or_state, (int, np.integer)) else k_or_state
        return query_gp_field(self.gp, m, P, name, points, include_noise, self.offsets if physical else None)


def query_gp_field(gp: GpSubsystem, m, P, name, points=None, include_noise=False, offsets=None):
    f = gp[name]
    d = len(f.grid.dims)
    if points is None:
        points = np.zeros((1, d))
    points = np.asarray(points, dtype=float)
    points = points.reshape(-1, d) if d else points.reshape(max(len(points), 1), 0)
    npts = points.shape[0]
    mean = np.zeros(npts)
    var = np.zeros(npts)
    idx = []
    rows = []
    if f.wv is not None:
        W, interp = query_weights(f, points)
        vi = gp.value_index(name)
        idx.extend(vi)
        rows.append(W)
        var += interp
    if include_noise and f.exp is not None:
        idx.append(gp.noise_index(name))
        rows.append(np.ones((npts, 1)))
    if idx:
        Wfull = np.hstack(rows)
        idx = np.array(idx, dtype=int)
        mean += Wfull @ m[idx]
        var += np.einsum("ij,jk,ik->i", Wfull, P[np.ix_(idx, idx)], Wfull)
    if offsets is not None:
        c = offsets[name]
        return c * (1.0 + mean), c * c * var
    return mean, var


def rts_smooth(checkpoints: Sequence[FilterCheckpoint], gp: GpSubsystem, offsets: dict | None = None) -> SmoothedPosterior:
    """Backward fixed-interval smoothing of the GP subsystem over checkpoints."""
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    K = len(checkpoints)
    means = np.array([c.post_gp_mean for c in checkpoints])
    covs = np.array([c.post_gp_cov for c in checkpoints])
    for k in range(K - 2, -1, -1):
        nxt = checkpoints[k + 1]
        Pf = checkpoints[k].post_gp_cov
        A = nxt.transition_used
        # C = Pf A' (P_pred)^-1
        C = _solve_psd(nxt.pre_gp_cov, A @ Pf).T
        means[k] = checkpoints[k].post_gp_mean + C @ (means[k + 1] - nxt.pre_gp_mean)
        Ps = Pf + C @ (covs[k + 1] - nxt.pre_gp_cov) @ C.T
        covs[k] = 0.5 * (Ps + Ps.T)
    zetas = np.array([c.zeta for c in checkpoints])
    return SmoothedPosterior(gp, zetas, means, covs, offsets, list(checkpoints))


def smoothed_at(smoothed: SmoothedPosterior, zeta: float) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed GP state at any ``zeta``.

    Between checkpoints the filtered state of the left neighbour is
    propagated to ``zeta`` and corrected with one backward smoothing step
    from the right neighbour.  Before the first checkpoint the smoothed first
    state is used; beyond the last it is extrapolated.
    """
    z = smoothed.zetas
    if zeta <= z[0]:
        return smoothed.at(0)
    if zeta >= z[-1]:
        return propagate_to(smoothed, zeta)
    if smoothed.checkpoints is None:
        raise ValueError("interpolation needs the filter checkpoints")
    k = int(np.searchsorted(z, zeta, side="right")) - 1
    if zeta == z[k]:
        return smoothed.at(k)
    left = smoothed.checkpoints[k]
    gp = smoothed.gp
    m, P, _ = gp.propagate(left.post_gp_mean, left.post_gp_cov, zeta - z[k])
    m_next, P_next, A = gp.propagate(m, P, z[k + 1] - zeta)
    C = _solve_psd(P_next, A @ P).T
    ms = m + C @ (smoothed.means[k + 1] - m_next)
    Ps = P + C @ (smoothed.covs[k + 1] - P_next) @ C.T
    return ms, 0.5 * (Ps + Ps.T)


def forecast(
    smoothed: SmoothedPosterior,
    zeta_star: float,
    queries: dict,
    include_noise: bool = False,
    physical: bool = True,
) -> dict:
    """Extrapolate the last smoothed GP state to ``zeta_star`` and query fields.

    ``queries`` maps field name to an array of operating points (or None for
    fields without inputs).  Returns ``{name: (mean, var)}``.
    """
    dz = zeta_star - smoothed.zetas[-1]
    if dz < 0:
        raise ValueError("forecast target precedes the last checkpoint")
    m, P, _ = smoothed.gp.propagate(smoothed.means[-1], smoothed.covs[-1], dz)
    offsets = smoothed.offsets if physical else None
    return {
        name: query_gp_field(smoothed.gp, m, P, name, pts, include_noise, offsets)
        for name, pts in queries.items()
    }


def propagate_to(smoothed: SmoothedPosterior, zeta_star: float) -> tuple[np.ndarray, np.ndarray]:
    dz = zeta_star - smoothed.zetas[-1]
    if dz < 0:
        raise ValueError("target precedes the last checkpoint")
    m, P, _ = smoothed.gp.propagate(smoothed.means[-1], smoothed.covs[-1], dz)
    return m, P


def make_ecm_subsystem(fields: dict[str, GpField]) -> GpSubsystem:
    return GpSubsystem([fields[n] for n in FIELD_NAMES])
