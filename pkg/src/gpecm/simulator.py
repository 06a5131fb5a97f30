"""Synthetic data: reference parameter functions, drive profiles and forward simulation.

Everything here is deterministic given the seeds passed in.  Simulated
segments carry the noise-free latent trajectory alongside the noisy
measurements so estimators can be scored; the latent arrays are never read
by the filter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import battery_model as bm
from .dataio import CycleSegment, RawTimeseries


def _alpha_t1(z):
    return 0.015 - 0.09 * (0.05 - np.asarray(z, dtype=float)) ** 3


def _beta_t1(z):
    return 0.002 * (1.0 - (np.asarray(z, dtype=float) - 0.5) ** 2)


def asinh_ratio(i) -> np.ndarray:
    """``asinh(|i|) / |i|`` with the removable singularity at 0 filled by 1."""
    a = np.abs(np.asarray(i, dtype=float))
    out = np.ones_like(a)
    big = a > 1e-4
    out[big] = np.arcsinh(a[big]) / a[big]
    small = ~big
    # series: 1 - a^2/6 + 3 a^4/40
    out[small] = 1.0 - a[small] ** 2 / 6.0 + 3.0 * a[small] ** 4 / 40.0
    return out


def _r0_t1(z, i):
    z = np.asarray(z, dtype=float)
    return 0.05 * asinh_ratio(i) + 0.04 * (z - 1.0) ** 2


def no_drift(zeta: float) -> dict:
    return {}


@dataclass(frozen=True)
class GroundTruth:
    """True circuit parameter functions and fixed constants.

    ``drift_fn(zeta)`` returns multipliers keyed by ``q_inv``, ``alpha``,
    ``beta`` or ``r0``; missing keys mean 1.
    """

    alpha_fn: Callable
    beta_fn: Callable
    r0_fn: Callable
    q_inv: float
    thermal: bm.ThermalParams
    ocv: bm.OcvCurve
    noise_v: float
    noise_t: float
    drift_fn: Callable[[float], dict] = no_drift

    def params(self, z: float, i: float, zeta: float = 0.0) -> bm.EcmParamSnapshot:
        m = self.drift_fn(zeta)
        return bm.EcmParamSnapshot(
            q_inv=self.q_inv * m.get("q_inv", 1.0),
            alpha=float(self.alpha_fn(z)) * m.get("alpha", 1.0),
            beta=float(self.beta_fn(z)) * m.get("beta", 1.0),
            r0=float(self.r0_fn(z, i)) * m.get("r0", 1.0),
        )

    def capacity(self, zeta: float) -> float:
        return 1.0 / (self.q_inv * self.drift_fn(zeta).get("q_inv", 1.0))

    def r0(self, z, i, zeta: float = 0.0):
        return self.r0_fn(z, i) * self.drift_fn(zeta).get("r0", 1.0)

    def with_drift(self, drift_fn: Callable[[float], dict]) -> "GroundTruth":
        return GroundTruth(
            self.alpha_fn, self.beta_fn, self.r0_fn, self.q_inv, self.thermal,
            self.ocv, self.noise_v, self.noise_t, drift_fn,
        )


def table1_truth() -> GroundTruth:
    """Reference cell used for the recovery study."""
    return GroundTruth(
        alpha_fn=_alpha_t1,
        beta_fn=_beta_t1,
        r0_fn=_r0_t1,
        q_inv=1.2,
        thermal=bm.ThermalParams(r_c=5.5, c_c=15.7),
        ocv=bm.table1_ocv(),
        noise_v=0.005,
        noise_t=0.1,
    )


@dataclass(frozen=True)
class CurrentProfile:
    t: np.ndarray
    i: np.ndarray
    seed: int | None = None
    source: str = "synthetic"

    def __post_init__(self):
        if len(self.t) != len(self.i):
            raise ValueError("t and i differ in length")
        if len(self.t) > 1 and np.max(np.abs(np.diff(self.t) - 1.0)) > 1e-9:
            raise ValueError("profile must be sampled at 1 Hz")

    def __len__(self) -> int:
        return len(self.t)

    def throughput(self) -> float:
        return float(np.sum(np.abs(self.i[:-1]))) / bm.SECONDS_PER_HOUR


def synth_profile(
    seed: int,
    duration_s: int = 1800,
    i_max: float = 5.0,
    mean_current: float = -1.0,
    rest_s: int = 30,
) -> CurrentProfile:
    """Random drive-like current trace at 1 Hz.

    Piecewise-constant pulses of random length and level (including rests),
    lightly smoothed, shifted toward ``mean_current`` and clipped to
    ``[-i_max, i_max]``.  The first ``rest_s`` seconds are at rest.
    """
    if duration_s < 60:
        raise ValueError("duration must be at least 60 s")
    if not i_max > 0:
        raise ValueError("i_max must be positive")
    rng = np.random.default_rng(seed)
    n = int(duration_s)
    n_drive = n - rest_s
    levels = []
    while sum(len(l) for l in levels) < n_drive:
        width = int(rng.integers(4, 40))
        u = rng.random()
        if u < 0.15:
            level = 0.0
        elif u < 0.35:
            level = rng.uniform(0.0, 0.8 * i_max)
        else:
            level = -rng.uniform(0.0, i_max)
        levels.append(np.full(width, level))
    drive = np.concatenate(levels)[:n_drive]
    kernel = np.ones(3) / 3.0
    drive = np.convolve(drive, kernel, mode="same")
    # nudge the mean toward the requested value; clipping makes this iterative
    for _ in range(20):
        shift = mean_current - drive.mean()
        if abs(shift) < 1e-3:
            break
        drive = np.clip(drive + shift, -i_max, i_max)
    i = np.concatenate([np.zeros(rest_s), drive])
    i[np.abs(i) < 1e-12] = 0.0
    return CurrentProfile(np.arange(n, dtype=float), i, seed)


@dataclass(frozen=True)
class Latent:
    z: np.ndarray
    v1: np.ndarray
    tc: np.ndarray
    v_clean: np.ndarray
    heat: np.ndarray


class SocBoundError(ValueError):
    pass


def simulate(
    truth: GroundTruth,
    profile: CurrentProfile,
    z_init: float = 0.9,
    t_amb: float = 25.0,
    noise_seed: int = 0,
    zeta: float = 0.0,
    cycle_index: int = 0,
    soc_bounds: tuple[float, float] = (0.02, 0.98),
) -> tuple[CycleSegment, Latent]:
    """Integrate the circuit at 1 Hz and add measurement noise.

    The state starts at rest (``v1 = 0``, ``tc = t_amb``).  Parameters are
    evaluated at the state and current at the start of each step.
    """
    n = len(profile)
    z = np.empty(n)
    v1 = np.empty(n)
    tc = np.empty(n)
    v = np.empty(n)
    heat = np.empty(n)
    s = bm.BatteryState(z_init, 0.0, t_amb)
    lo, hi = soc_bounds
    for k in range(n):
        if not lo <= s.z <= hi:
            raise SocBoundError(f"SOC {s.z:.4f} leaves [{lo}, {hi}] at sample {k}")
        i_k = float(profile.i[k])
        p = truth.params(s.z, i_k, zeta)
        z[k], v1[k], tc[k] = s.z, s.v1, s.tc
        v[k] = bm.output(s, i_k, p, truth.ocv)[0]
        heat[k] = s.v1 * i_k + p.r0 * i_k**2
        if k + 1 < n:
            s = bm.step_dynamics(s, i_k, t_amb, float(profile.t[k + 1] - profile.t[k]), p, truth.thermal)
    rng = np.random.default_rng(noise_seed)
    v_meas = v + truth.noise_v * rng.standard_normal(n)
    t_meas = tc + truth.noise_t * rng.standard_normal(n)
    seg = CycleSegment(
        t=profile.t.astype(float).copy(),
        i=profile.i.astype(float).copy(),
        v=v_meas,
        temp=t_meas,
        t_amb=np.full(n, float(t_amb)),
        zeta=float(zeta),
        cycle_index=cycle_index,
    )
    return seg, Latent(z, v1, tc, v, heat)


def simulate_aging(
    truth: GroundTruth,
    drift_fn: Callable[[float], dict],
    n_cycles: int,
    cycle_spacing_ah: float,
    seeds: Sequence[int] | int = 0,
    duration_s: int = 1800,
    i_max: float = 5.0,
    z_init: float = 0.9,
    t_amb: float = 25.0,
    mean_current: float = -1.0,
) -> tuple[list[CycleSegment], list[Latent]]:
    """A sequence of observed cycles with parameters scaled by ``drift_fn(zeta)``.

    Cycle ``k`` sits at ``zeta = k * cycle_spacing_ah``.  ``seeds`` is either a
    base seed or one seed per cycle; cycle ``k`` uses it for both its profile
    and its noise stream (profile seed ``s``, noise seed ``s + 1_000_003``).
    """
    if isinstance(seeds, (int, np.integer)):
        seeds = [int(seeds) * 10_007 + k for k in range(n_cycles)]
    if len(seeds) != n_cycles:
        raise ValueError("need one seed per cycle")
    aged = truth.with_drift(drift_fn)
    segs, lats = [], []
    for k in range(n_cycles):
        zeta = k * cycle_spacing_ah
        prof = synth_profile(seeds[k], duration_s, i_max, mean_current)
        seg, lat = simulate(aged, prof, z_init, t_amb, seeds[k] + 1_000_003, zeta, k)
        segs.append(seg)
        lats.append(lat)
    return segs, lats


def simulate_checkup(
    truth: GroundTruth,
    zeta: float = 0.0,
    c_rate: float = 0.3,
    i_pulse: float = 2.0,
    pulse_s: int = 10,
    socs: Sequence[float] = (0.8, 0.5, 0.2),
    t_amb: float = 25.0,
    rest_s: int = 600,
    noise: bool = False,
    seed: int = 0,
    t_start: float = 0.0,
) -> RawTimeseries:
    """A reference test: full CC discharge, recharge, then pulse pairs at set SOCs.

    Sequence: rest at ``z = 1``; constant-current discharge at ``c_rate`` to
    ``z = 0``; rest; constant-current charge back to ``z = 1``; then for each
    SOC in ``socs`` (descending) a CC discharge to that SOC, rest, a discharge
    pulse, rest, a charge pulse, rest.
    """
    q_ah = truth.capacity(zeta)
    i_cc = c_rate * q_ah
    segments: list[tuple[float, int, str]] = [(0.0, rest_s, "rest")]
    t_full = int(round(q_ah / i_cc * bm.SECONDS_PER_HOUR))
    segments += [(-i_cc, t_full, "cc_discharge"), (0.0, rest_s, "rest"), (i_cc, t_full, "cc_charge"), (0.0, rest_s, "rest")]
    z_now = 1.0
    for soc in sorted(socs, reverse=True):
        dt_cc = int(round((z_now - soc) * q_ah / i_cc * bm.SECONDS_PER_HOUR))
        if dt_cc > 0:
            segments.append((-i_cc, dt_cc, "cc_discharge_to_soc"))
        segments += [
            (0.0, rest_s, "rest"),
            (-i_pulse, pulse_s, "pulse_discharge"),
            (0.0, rest_s, "rest"),
            (i_pulse, pulse_s, "pulse_charge"),
            (0.0, rest_s, "rest"),
        ]
        z_now = soc
    i = np.concatenate([np.full(n, c) for c, n, _ in segments])
    labels = np.concatenate([np.full(n, lab, dtype=object) for _, n, lab in segments])
    prof = CurrentProfile(np.arange(len(i), dtype=float), i)
    seg, lat = simulate(truth, prof, 1.0, t_amb, seed, zeta, 0, soc_bounds=(-0.01, 1.01))
    v, temp = (seg.v, seg.temp) if noise else (lat.v_clean, lat.tc)
    return RawTimeseries(
        t=prof.t + t_start, i=i, v=np.asarray(v), temp=np.asarray(temp),
        t_amb=np.full(len(i), float(t_amb)), label=labels.astype(str),
    )
