"""Loading, segmenting and resampling cell telemetry, plus reference-test extraction.

The interchange format is a UTF-8 CSV with header
``t_s,i_A,v_V,temp_C,t_amb_C[,label]``; current is positive on charge.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import interpolate, optimize

SECONDS_PER_HOUR = 3600.0
CSV_COLUMNS = ("t_s", "i_A", "v_V", "temp_C", "t_amb_C")
FIELDS = ("t", "i", "v", "temp", "t_amb")
SCHEMA_VERSION = 1


class DataError(ValueError):
    """Input data is malformed or does not contain what was asked for."""


@dataclass
class RawTimeseries:
    t: np.ndarray
    i: np.ndarray
    v: np.ndarray
    temp: np.ndarray
    t_amb: np.ndarray
    label: np.ndarray | None = None
    dropped_rows: int = 0

    def __post_init__(self):
        for name in FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = len(self.t)
        if any(len(getattr(self, name)) != n for name in FIELDS):
            raise DataError("columns differ in length")
        if self.label is not None:
            self.label = np.asarray(self.label, dtype=str)
        if n > 1 and np.any(np.diff(self.t) <= 0):
            bad = int(np.argmax(np.diff(self.t) <= 0)) + 1
            raise DataError(f"time not strictly increasing at row {bad}")

    def __len__(self) -> int:
        return len(self.t)

    def slice(self, start: int, stop: int) -> "RawTimeseries":
        lab = None if self.label is None else self.label[start:stop]
        return RawTimeseries(*(getattr(self, f)[start:stop] for f in FIELDS), label=lab)


@dataclass
class CycleSegment:
    """One cycle resampled onto a uniform 1 Hz grid."""

    t: np.ndarray
    i: np.ndarray
    v: np.ndarray
    temp: np.ndarray
    t_amb: np.ndarray
    zeta: float
    cycle_index: int = 0
    span: tuple[float, float] | None = None

    def __post_init__(self):
        for name in FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if len(self.t) < 2:
            raise DataError("segment needs at least two samples")
        if np.max(np.abs(np.diff(self.t) - 1.0)) > 1e-9:
            raise DataError("segment is not uniformly sampled at 1 Hz")
        if self.span is None:
            self.span = (float(self.t[0]), float(self.t[-1]))

    def __len__(self) -> int:
        return len(self.t)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "zeta_Ah": self.zeta,
            "cycle_index": self.cycle_index,
            "span": list(self.span),
            **{name: getattr(self, name).tolist() for name in FIELDS},
        }


@dataclass
class CheckupRecord:
    zeta: float
    capacity_ah: float
    pulse_r0: dict = field(default_factory=dict)  # soc -> ohm

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "zeta_Ah": self.zeta,
            "capacity_Ah": self.capacity_ah,
            "pulse_r0_mohm": {f"{k:.2f}": 1e3 * v for k, v in sorted(self.pulse_r0.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CheckupRecord":
        if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise DataError(f"unsupported checkup schema_version {d.get('schema_version')}")
        try:
            pulses = {float(k): 1e-3 * float(v) for k, v in d.get("pulse_r0_mohm", {}).items()}
            return cls(float(d["zeta_Ah"]), float(d["capacity_Ah"]), pulses)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed checkup record: {exc}") from None


# ---------------------------------------------------------------------------
# CSV


def load_timeseries(
    path: str | Path,
    column_map: Mapping[str, str] | None = None,
    t_amb: float | None = None,
) -> RawTimeseries:
    """Read a telemetry CSV.

    ``column_map`` maps file column names to the canonical names
    ``t_s, i_A, v_V, temp_C, t_amb_C, label``.  When the file has no ambient
    column, ``t_amb`` supplies a constant.  Rows with missing or NaN values
    are dropped and counted.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    rename = dict(column_map or {})
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [rename.get(h.strip(), h.strip()) for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        needed = list(CSV_COLUMNS[:4]) + ([] if t_amb is not None else ["t_amb_C"])
        missing = [c for c in needed if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        pos = {c: header.index(c) for c in CSV_COLUMNS if c in header}
        lab_pos = header.index("label") if "label" in header else None
        rows, labels, dropped = [], [], 0
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                vals = [float(rec[pos[c]]) if c in pos else float(t_amb) for c in CSV_COLUMNS]
            except (ValueError, IndexError) as exc:
                if isinstance(exc, IndexError) or any(rec[pos[c]].strip() == "" for c in pos):
                    dropped += 1
                    continue
                raise DataError(f"{path}:{lineno}: cannot parse {rec!r}") from exc
            if any(math.isnan(x) for x in vals):
                dropped += 1
                continue
            rows.append(vals)
            labels.append(rec[lab_pos] if lab_pos is not None else "")
    if dropped:
        warnings.warn(f"{path}: dropped {dropped} rows with missing values", RuntimeWarning)
    data = np.array(rows, dtype=float).reshape(-1, len(CSV_COLUMNS))
    t = data[:, 0]
    if len(t) > 1 and np.any(np.diff(t) <= 0):
        bad = int(np.argmax(np.diff(t) <= 0)) + 1
        raise DataError(f"{path}: time not strictly increasing at data row {bad} (t={t[bad]})")
    return RawTimeseries(
        t, data[:, 1], data[:, 2], data[:, 3], data[:, 4],
        label=np.array(labels) if lab_pos is not None else None,
        dropped_rows=dropped,
    )


def write_timeseries(path: str | Path, series) -> None:
    """Write a :class:`RawTimeseries` or :class:`CycleSegment` as CSV."""
    label = getattr(series, "label", None)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(CSV_COLUMNS) + (["label"] if label is not None else []))
        cols = [getattr(series, f) for f in FIELDS]
        for k in range(len(series.t)):
            row = [repr(float(c[k])) for c in cols]
            if label is not None:
                row.append(str(label[k]))
            w.writerow(row)


def segment_from_raw(raw: RawTimeseries, zeta: float, cycle_index: int = 0) -> CycleSegment:
    return CycleSegment(raw.t, raw.i, raw.v, raw.temp, raw.t_amb, zeta, cycle_index)


# ---------------------------------------------------------------------------
# Segmentation


@dataclass(frozen=True)
class SegmentRules:
    """Cycle boundary rules.

    A run of ``|i| < rest_current`` lasting at least ``rest_s`` seconds
    separates cycles.  If ``label`` is given, only rows with that label are
    considered part of a cycle.
    """

    rest_current: float = 0.05
    rest_s: float = 300.0
    min_duration_s: float = 60.0
    label: str | None = None
    lead_in_s: float = 30.0


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Start/stop index pairs of ``True`` runs."""
    d = np.diff(np.concatenate([[0], mask.astype(int), [0]]))
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def segment_cycles(raw: RawTimeseries, rules: SegmentRules = SegmentRules()) -> list[tuple[int, int]]:
    """Index spans ``[start, stop)`` of active cycles.

    Each span includes up to ``rules.lead_in_s`` seconds of the preceding rest
    so that cycles start at rest.
    """
    active = np.abs(raw.i) >= rules.rest_current
    if rules.label is not None:
        if raw.label is None:
            raise DataError("label rule given but the series has no label column")
        active &= raw.label == rules.label
    # close short gaps: rests shorter than rest_s do not split a cycle
    idle = ~active
    for a, b in _runs(idle):
        if a == 0 or b == len(idle):
            continue
        if raw.t[b] - raw.t[a - 1] < rules.rest_s:
            active[a:b] = True
    spans = []
    for a, b in _runs(active):
        start = a
        while start > 0 and raw.t[a] - raw.t[start - 1] <= rules.lead_in_s and not active[start - 1]:
            start -= 1
        if raw.t[b - 1] - raw.t[start] >= rules.min_duration_s:
            spans.append((int(start), int(b)))
    if not spans:
        raise DataError("no cycles found")
    return spans


def select_every(spans: Sequence, k: int = 30) -> list:
    """Last span of every complete block of ``k``; an incomplete trailing block is dropped."""
    if k < 1:
        raise ValueError("k must be at least 1")
    return list(spans[k - 1::k])


# ---------------------------------------------------------------------------
# Resampling and lifetime coordinate


def accumulate_zeta(t, i) -> np.ndarray:
    """Cumulative absolute charge throughput in Ah (left-rectangle rule)."""
    t = np.asarray(t, dtype=float)
    i = np.asarray(i, dtype=float)
    inc = np.abs(i[:-1]) * np.diff(t) / SECONDS_PER_HOUR
    return np.concatenate([[0.0], np.cumsum(inc)])


def resample_1hz(raw: RawTimeseries, zeta: float = 0.0, cycle_index: int = 0) -> CycleSegment:
    """PCHIP-interpolate a span onto integer seconds inside its time range."""
    if raw.t[-1] - raw.t[0] < 60.0:
        raise DataError("span shorter than 60 s")
    t_new = np.arange(math.ceil(raw.t[0] - 1e-9), math.floor(raw.t[-1] + 1e-9) + 1, dtype=float)
    out = {}
    for name in FIELDS[1:]:
        out[name] = interpolate.PchipInterpolator(raw.t, getattr(raw, name), extrapolate=False)(t_new)
    return CycleSegment(t_new, out["i"], out["v"], out["temp"], out["t_amb"], zeta, cycle_index,
                        (float(raw.t[0]), float(raw.t[-1])))


def prepare_segments(
    raw: RawTimeseries,
    rules: SegmentRules = SegmentRules(),
    k: int = 30,
) -> list[CycleSegment]:
    """Segment, down-select and resample a cell's record; assign start-of-cycle ``zeta``."""
    zeta = accumulate_zeta(raw.t, raw.i)
    spans = segment_cycles(raw, rules)
    chosen = select_every(list(enumerate(spans)), k)
    return [resample_1hz(raw.slice(a, b), float(zeta[a]), idx) for idx, (a, b) in chosen]


# ---------------------------------------------------------------------------
# Reference tests


@dataclass(frozen=True)
class CheckupProtocol:
    """Signature of a reference test inside a record.

    ``cc_current`` is the magnitude of the constant-current capacity
    discharge; pulses are runs of ``|i| >= pulse_min`` shorter than
    ``pulse_max_s``.  ``q_hint`` (Ah) converts charge into SOC when no
    capacity run has been found yet.
    """

    cc_current: float
    cc_tol: float = 0.02
    cc_min_s: float = 600.0
    pulse_min: float = 0.5
    pulse_max_s: float = 60.0
    socs: tuple = (0.8, 0.5, 0.2)
    soc_tol: float = 0.05


def extract_checkups(raw: RawTimeseries, protocol: CheckupProtocol, zeta0: float = 0.0) -> list[CheckupRecord]:
    """Capacity and pulse resistances from every reference test in ``raw``.

    Capacity is the charge of each constant-current discharge that is
    followed by a constant-current recharge (a full cycle).  SOC
    before a pulse is tracked by counting charge from the end of that
    discharge (``z = 0`` there).  Pulse resistance is ``dV / dI`` between the
    last sample before onset and the sample 1 s after onset, averaged over
    the charge and discharge pulse at each SOC.
    """
    zeta = accumulate_zeta(raw.t, raw.i) + zeta0
    i = raw.i
    tol = protocol.cc_tol * protocol.cc_current
    cc = np.abs(i + protocol.cc_current) <= tol
    active = np.abs(i) > tol
    cc_runs = []
    for a, b in _runs(cc):
        if raw.t[b - 1] - raw.t[a] < protocol.cc_min_s:
            continue
        # a capacity discharge is followed by a constant-current recharge; a
        # discharge to an SOC set point is followed by pulses instead
        after = np.flatnonzero(active[b:])
        if len(after) and abs(i[b + after[0]] - protocol.cc_current) <= tol:
            cc_runs.append((a, b))
    if not cc_runs:
        raise DataError("no constant-current capacity discharge found")
    records = []
    for n, (a, b) in enumerate(cc_runs):
        nxt = cc_runs[n + 1][0] if n + 1 < len(cc_runs) else len(i)
        # the capacity run must end at a rest, not continue into further discharge
        dt = np.diff(raw.t[a:b + 1]) if b < len(i) else np.diff(raw.t[a:b])
        q = float(np.sum(np.abs(i[a:a + len(dt)]) * dt) / SECONDS_PER_HOUR)
        if q <= 0:
            continue
        charge = np.concatenate([[0.0], np.cumsum(i[b - 1:nxt - 1] * np.diff(raw.t[b - 1:nxt]))]) / SECONDS_PER_HOUR
        soc_track = charge / q
        pulses = _runs(np.abs(i[b:nxt]) >= protocol.pulse_min)
        found: dict[float, list[float]] = {}
        for pa, pb in pulses:
            pa += b
            pb += b
            if raw.t[pb - 1] - raw.t[pa] > protocol.pulse_max_s or pa < 1 or pa + 1 >= len(i):
                continue
            soc = soc_track[pa - (b - 1)]
            target = min(protocol.socs, key=lambda s: abs(s - soc))
            if abs(target - soc) > protocol.soc_tol:
                continue
            j = int(np.searchsorted(raw.t, raw.t[pa] + 1.0 - 1e-9))
            if j >= len(i) or abs(raw.t[j] - raw.t[pa] - 1.0) > 1e-6:
                continue
            di = i[j] - i[pa - 1]
            if abs(di) < 1e-9:
                continue
            found.setdefault(target, []).append((raw.v[j] - raw.v[pa - 1]) / di)
        missing = [s for s in protocol.socs if s not in found]
        if missing:
            warnings.warn(f"reference test at zeta={zeta[a]:.3f}: no pulses at SOC {missing}", RuntimeWarning)
        records.append(CheckupRecord(float(zeta[a]), q, {s: float(np.mean(v)) for s, v in found.items()}))
    return records


# ---------------------------------------------------------------------------
# Thermal fit


@dataclass(frozen=True)
class ThermalFit:
    r_c: float
    delta_t0: float
    rmse: float


def fit_thermal_resistance(t, temp, t_amb, c_c: float) -> ThermalFit:
    """Least-squares fit of ``temp = t_amb + dT0 exp(-t / (r_c c_c))`` for ``(r_c, dT0)``."""
    t = np.asarray(t, dtype=float) - float(np.asarray(t)[0])
    y = np.asarray(temp, dtype=float) - np.asarray(t_amb, dtype=float)
    if len(t) < 30:
        raise DataError("thermal relaxation span needs at least 30 samples")
    head = np.mean(np.abs(y[: max(3, len(y) // 10)]))
    tail = np.mean(np.abs(y[-max(3, len(y) // 10):]))
    if not head > 1.5 * tail or head <= 0:
        raise DataError("span does not show a decaying temperature difference")
    # log-linear start, then nonlinear least squares in log r_c
    pos = y > 0.2 * head
    slope = np.polyfit(t[pos], np.log(np.abs(y[pos])), 1)[0] if pos.sum() > 2 else -1.0 / t[-1]
    tau0 = -1.0 / slope if slope < 0 else t[-1]
    x0 = np.array([math.log(tau0 / c_c), y[0]])

    def resid(x):
        return x[1] * np.exp(-t / (math.exp(x[0]) * c_c)) - y

    sol = optimize.least_squares(resid, x0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    r_c = math.exp(sol.x[0])
    return ThermalFit(r_c, float(sol.x[1]), float(np.sqrt(np.mean(sol.fun**2))))


def save_json(path: str | Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
