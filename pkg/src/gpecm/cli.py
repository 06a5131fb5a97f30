"""Command-line pipeline: simulate, fit, estimate, forecast, validate.

Every command reads one JSON config (see :mod:`gpecm.config`), writes its
outputs into ``out_dir`` and records a manifest holding the resolved config
plus SHA-256 digests of inputs and outputs.  Passing a manifest back as
``--config`` reruns the command and reproduces the same bytes.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import battery_model as bm
from . import dataio, hyperopt, simulator
from .config import ConfigError, dumps, load_config
from .gp_field import ConditioningError
from .joint_ekf import rts_smooth, run_lifetime, smoothed_at, query_gp_field

log = logging.getLogger("gpecm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST_SCHEMA = 1


# ---------------------------------------------------------------------------
# Output staging


class Outputs:
    """Files are written to a staging directory and moved into place only on success."""

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.out_dir))
        except OSError as exc:
            raise ConfigError(f"cannot use output directory {out_dir}: {exc}") from None
        self.names: list[str] = []

    def path(self, name: str) -> Path:
        self.names.append(name)
        return self.stage / name

    def write_text(self, name: str, text: str) -> None:
        with open(self.path(name), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)

    def commit(self) -> dict:
        digests = {}
        for name in self.names:
            digests[name] = sha256(self.stage / name)
            os.replace(self.stage / name, self.out_dir / name)
        shutil.rmtree(self.stage, ignore_errors=True)
        return digests

    def abort(self) -> None:
        shutil.rmtree(self.stage, ignore_errors=True)


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Building blocks from config


def _ocv(cfg) -> bm.OcvCurve:
    path = cfg["model"]["ocv_csv"]
    if path is None:
        return bm.table1_ocv()
    try:
        return bm.OcvCurve.from_csv(path)
    except FileNotFoundError:
        raise ConfigError(f"OCV table {path} not found") from None


def _thermal(cfg) -> bm.ThermalParams:
    th = cfg["model"]["thermal"]
    return bm.ThermalParams(r_c=float(th["r_c"]), c_c=float(th["c_c"]))


def drift_function(coeffs: dict) -> Callable[[float], dict]:
    """Polynomial multipliers ``1 + c1 zeta + c2 zeta^2 + ...`` per field."""
    coeffs = {k: [float(c) for c in v] for k, v in coeffs.items() if v}

    def drift(zeta: float) -> dict:
        return {k: 1.0 + sum(c * zeta ** (n + 1) for n, c in enumerate(cs)) for k, cs in coeffs.items()}

    return drift


def _truth(cfg) -> simulator.GroundTruth:
    t = simulator.table1_truth()
    return simulator.GroundTruth(
        t.alpha_fn, t.beta_fn, t.r0_fn, t.q_inv, _thermal(cfg), _ocv(cfg), t.noise_v, t.noise_t,
        drift_function(cfg["simulation"]["drift"]),
    )


def _spec(cfg, z_range, i_range) -> hyperopt.ModelSpec:
    m = cfg["model"]
    return hyperopt.ModelSpec(
        z_range=tuple(z_range), i_range=tuple(i_range), ocv=_ocv(cfg), thermal=_thermal(cfg),
        n_z=m["n_z"], n_r0_z=m["n_r0_z"], n_r0_i=m["n_r0_i"],
        offsets={k: float(v) for k, v in m["offsets"].items()},
        q_batt=tuple(map(float, m["q_batt"])), p_batt0=tuple(map(float, m["p_batt0"])),
        use_lambda=bool(m["use_lambda"]),
    )


def _read_json(path, what: str, error=ConfigError) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise error(f"{what} {path} not found") from None
    except json.JSONDecodeError as exc:
        raise error(f"{what} {path}: {exc}") from None


class Dataset:
    """Segments and reference tests per cell, plus the files they came from."""

    def __init__(self, cells, checkups, inputs):
        self.cells: list[list[dataio.CycleSegment]] = cells
        self.checkups: list[list[dataio.CheckupRecord]] = checkups
        self.inputs: dict[str, str] = inputs


def load_dataset(cfg) -> Dataset:
    d = cfg["data"]
    inputs = {}
    if d["manifest"]:
        man_path = Path(d["manifest"])
        man = _read_json(man_path, "dataset manifest", dataio.DataError)
        inputs[str(man_path)] = sha256(man_path)
        if man.get("command") != "simulate":
            raise ConfigError("data.manifest must come from the simulate command")
        cells, checkups = [], []
        for cell in man["outputs_index"]["cells"]:
            path = man_path.parent / cell["csv"]
            raw = dataio.load_timeseries(path)
            inputs[str(path)] = sha256(path)
            segs = [
                dataio.segment_from_raw(raw.slice(s["row_start"], s["row_stop"]), s["zeta_Ah"], s["cycle_index"])
                for s in cell["segments"]
            ]
            for seg in segs:
                seg.t = seg.t - seg.t[0]
            cells.append(segs)
            checkups.append([dataio.CheckupRecord.from_dict(r) for r in cell["checkups"]])
        return Dataset(cells, checkups, inputs)
    if not d["cells"]:
        raise ConfigError("no data: set data.manifest or data.cells")
    rules = dataio.SegmentRules(**d["segment"])
    cells, checkups = [], []
    for n, path in enumerate(d["cells"]):
        raw = dataio.load_timeseries(path, d["column_map"], d["t_amb"])
        inputs[str(path)] = sha256(path)
        cells.append(dataio.prepare_segments(raw, rules, d["select_every"]))
        recs = []
        if n < len(d["checkups"]) and d["checkups"][n]:
            cpath = d["checkups"][n]
            craw = dataio.load_timeseries(cpath, d["column_map"], d["t_amb"])
            inputs[str(cpath)] = sha256(cpath)
            cp = d["checkup_protocol"]
            proto = dataio.CheckupProtocol(float(cp["cc_current"]), pulse_min=float(cp["pulse_min"]),
                                           socs=tuple(cp["socs"]))
            recs = dataio.extract_checkups(craw, proto)
        checkups.append(recs)
    return Dataset(cells, checkups, inputs)


def _stage_file(cfg, stage: int) -> Path | None:
    """Explicit ``fit.stageN`` path, else ``out_dir/stageN.json`` if present.

    A path found by the fallback is written back into ``cfg`` so the manifest
    replays against the same file from any output directory.
    """
    key = f"stage{stage}"
    p = cfg["fit"][key]
    if p:
        return Path(p)
    default = Path(cfg["out_dir"]) / f"stage{stage}.json"
    if not default.is_file():
        return None
    cfg["fit"][key] = str(default.resolve())
    return default


def _load_fit(path: Path) -> tuple[hyperopt.HyperParams, dict]:
    doc = _read_json(path, "hyperparameter file")
    if doc.get("schema_version") != hyperopt.SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema_version {doc.get('schema_version')}")
    try:
        return hyperopt.HyperParams.from_dict(doc["hyperparameters"]), doc["model"]
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _fitted_model(cfg, inputs: dict):
    """Hyperparameters and grid ranges: stage 2 if available, else stage 1."""
    path = _stage_file(cfg, 2) or _stage_file(cfg, 1)
    if path is None:
        raise ConfigError("no fitted hyperparameters: run 'fit --stage 1' (and 2) or set fit.stage1/fit.stage2")
    inputs[str(path)] = sha256(path)
    theta, model = _load_fit(path)
    return theta, _spec(cfg, model["z_range"], model["i_range"])


# ---------------------------------------------------------------------------
# Posterior summaries


def _q_ah(mean_qinv: float, var_qinv: float) -> tuple[float, float]:
    # first-order moments of 1/q
    return 1.0 / mean_qinv, math.sqrt(max(var_qinv, 0.0)) / mean_qinv**2


def _report_header(cfg) -> list[str]:
    r = cfg["report"]
    cols = ["zeta_Ah", "q_Ah_mean", "q_Ah_sd"]
    for z in r["z_points"]:
        for i in r["i_points"]:
            tag = f"r0_mohm_at{z:g}_{i:g}"
            cols += [f"{tag}_mean", f"{tag}_sd"]
    for name in ("alpha", "beta"):
        for z in r["z_points"]:
            cols += [f"{name}_at{z:g}_mean", f"{name}_at{z:g}_sd"]
    return cols


def _report_row(cfg, gp, offsets, zeta, m, P) -> list[float]:
    r = cfg["report"]
    qm, qv = query_gp_field(gp, m, P, "q_inv", None, False, offsets)
    row = [float(zeta), *_q_ah(float(qm[0]), float(qv[0]))]
    pts = np.array([(z, i) for z in r["z_points"] for i in r["i_points"]], dtype=float)
    rm, rv = query_gp_field(gp, m, P, "r0", pts, False, offsets)
    for a, b in zip(rm, rv):
        row += [1e3 * float(a), 1e3 * math.sqrt(max(float(b), 0.0))]
    zs = np.array(r["z_points"], dtype=float)[:, None]
    for name in ("alpha", "beta"):
        fm, fv = query_gp_field(gp, m, P, name, zs, False, offsets)
        for a, b in zip(fm, fv):
            row += [float(a), math.sqrt(max(float(b), 0.0))]
    return row


def _curves(cfg, spec, gp, offsets, m, P) -> dict:
    n = cfg["report"]["n_curve"]
    z = np.linspace(*spec.z_range, n)
    i = np.linspace(*spec.i_range, n)
    out = {"z": z.tolist(), "i_A": i.tolist()}
    qm, qv = query_gp_field(gp, m, P, "q_inv", None, False, offsets)
    out["q_inv"] = {"mean": float(qm[0]), "var": float(qv[0])}
    for name in ("alpha", "beta"):
        fm, fv = query_gp_field(gp, m, P, name, z[:, None], False, offsets)
        out[name] = {"mean": fm.tolist(), "var": fv.tolist()}
    Z, I = np.meshgrid(z, i, indexing="ij")
    rm, rv = query_gp_field(gp, m, P, "r0", np.column_stack([Z.ravel(), I.ravel()]), False, offsets)
    out["r0"] = {"mean": rm.reshape(n, n).tolist(), "var": rv.reshape(n, n).tolist()}
    return out


def _smooth_cell(theta, spec, segs):
    model = hyperopt.build_model(theta, spec, zeta_origin=None)
    with np.errstate(all="raise"):
        res = run_lifetime(segs, model)
    return model, res, rts_smooth(res.checkpoints, model.gp, model.offsets)


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(cfg, out: Outputs) -> dict:
    s = cfg["simulation"]
    truth = _truth(cfg)
    base = truth.with_drift(simulator.no_drift)
    cells = []
    for c in range(s["n_cells"]):
        segs, lats = simulator.simulate_aging(
            base, truth.drift_fn, s["n_cycles"], float(s["cycle_spacing_ah"]), seeds=cfg["seed"] * 1000 + c,
            duration_s=s["duration_s"], i_max=float(s["i_max"]), z_init=float(s["z_init"]),
            t_amb=float(s["t_amb"]), mean_current=float(s["mean_current"]),
        )
        gap = 3600.0
        t0, rows, lat_rows, index = 0.0, [], [], []
        for seg, lat in zip(segs, lats):
            t = seg.t - seg.t[0] + t0
            index.append({"cycle_index": seg.cycle_index, "zeta_Ah": seg.zeta,
                          "row_start": len(rows), "row_stop": len(rows) + len(t)})
            rows += list(zip(t, seg.i, seg.v, seg.temp, seg.t_amb))
            lat_rows += list(zip(t, lat.z, lat.v1, lat.tc, lat.v_clean))
            t0 = t[-1] + gap
        name = f"cell{c}"
        out.write_text(f"{name}.csv", _csv_text(dataio.CSV_COLUMNS, rows))
        out.write_text(f"{name}_latent.csv", _csv_text(("t_s", "z", "v1_V", "tc_C", "v_clean_V"), lat_rows))
        checkups = []
        for seg in segs:
            socs = cfg["report"]["z_points"]
            ip = float(s["i_pulse"])
            pulses = {float(z): float(0.5 * (truth.r0(z, ip, seg.zeta) + truth.r0(z, -ip, seg.zeta))) for z in socs}
            checkups.append(dataio.CheckupRecord(seg.zeta, truth.capacity(seg.zeta), pulses).to_dict())
        cells.append({"csv": f"{name}.csv", "latent": f"{name}_latent.csv", "segments": index, "checkups": checkups})
    print(f"simulated {s['n_cells']} cell(s) x {s['n_cycles']} cycle(s) into {out.out_dir}")
    return {"cells": cells}


def cmd_fit(cfg, out: Outputs, stage: int, inputs: dict) -> dict:
    f = cfg["fit"]
    box = hyperopt.Box.from_dict(f["box"])
    data = load_dataset(cfg)
    inputs.update(data.inputs)
    log_name = f"fit_stage{stage}.jsonl"
    fit_log = hyperopt.FitLog(out.path(log_name))
    if stage == 1:
        segs = [seg for cell in data.cells for seg in cell]
        q_nom = 1.0 / float(cfg["model"]["offsets"]["q_inv"])
        z_range, i_range = hyperopt.data_ranges(segs, _ocv(cfg), q_nom, cfg["model"]["range_margin"])
        spec = _spec(cfg, z_range, i_range)
        result = hyperopt.fit_stage1(
            [cell[0] for cell in data.cells], spec, seed=cfg["seed"], n_random=f["n_random"],
            n_refine=f["n_refine"], box=box, fit_log=fit_log, maxiter=f["maxiter"], step=f["fd_step"],
        )
    else:
        path = _stage_file(cfg, 1)
        if path is None:
            raise ConfigError("stage 2 needs the stage-1 result: run 'fit --stage 1' or set fit.stage1")
        inputs[str(path)] = sha256(path)
        theta1, model = _load_fit(path)
        z_range, i_range = model["z_range"], model["i_range"]
        spec = _spec(cfg, z_range, i_range)
        result = hyperopt.fit_stage2(
            data.cells, theta1, spec, hyperopt.default_lattice(box, f["lattice_n"]), box, fit_log,
            f["maxiter"], f["fd_step"], zeta_origin=min(c[0].zeta for c in data.cells),
        )
    doc = result.to_dict()
    doc["stage"] = stage
    doc["model"] = {"z_range": [float(x) for x in z_range], "i_range": [float(x) for x in i_range]}
    out.write_text(f"stage{stage}.json", dumps(doc))
    print(f"stage {stage}: phi = {result.phi:.6f}")
    for n in result.names:
        print(f"  {n:12s} {getattr(result.theta, n):.6g}")
    if result.at_bounds:
        print(f"  at bounds: {', '.join(result.at_bounds)}")
    return {}


def cmd_estimate(cfg, out: Outputs, inputs: dict, forecast_only: bool = False) -> dict:
    data = load_dataset(cfg)
    inputs.update(data.inputs)
    theta, spec = _fitted_model(cfg, inputs)
    zeta_star = [float(z) for z in cfg["forecast"]["zeta_star"]]
    if forecast_only and not zeta_star:
        raise ConfigError("forecast.zeta_star is empty")
    header = _report_header(cfg)
    for c, segs in enumerate(data.cells):
        model, res, sm = _smooth_cell(theta, spec, segs)
        name = f"cell{c}"
        if forecast_only:
            if min(zeta_star) < sm.zetas[-1]:
                raise ConfigError("forecast.zeta_star must not precede the last cycle")
            states = [(z, *smoothed_at(sm, z)) for z in zeta_star]
            stem = f"{name}_forecast"
        else:
            states = [(z, *sm.at(k)) for k, z in enumerate(sm.zetas)]
            stem = f"{name}_estimate"
        rows = [_report_row(cfg, model.gp, model.offsets, z, m, P) for z, m, P in states]
        out.write_text(f"{stem}.csv", _csv_text(header, rows))
        doc = {
            "schema_version": MANIFEST_SCHEMA,
            "cell": c,
            "phi": res.phi_total if not forecast_only else None,
            "hyperparameters": theta.to_dict(),
            "checkpoints": [
                {"zeta_Ah": float(z), **_curves(cfg, spec, model.gp, model.offsets, m, P)} for z, m, P in states
            ],
            "diagnostics": {
                "max_asymmetry": res.diagnostics.max_asymmetry,
                "min_diag_ratio": res.diagnostics.min_diag_ratio,
                "floors": res.diagnostics.floors,
                "soc_clamps": res.diagnostics.soc_clamps,
            },
        }
        out.write_text(f"{stem}.json", dumps(doc))
        print(f"{name}: {len(states)} {'forecast' if forecast_only else 'checkpoint'}(s), phi = {res.phi_total:.4f}")
    return {}


def validation_table(cfg, theta, spec, segs, checkups, holdout: int):
    """Per-checkup errors split into interpolated and extrapolated sets.

    The last ``holdout`` segments are withheld from the filter; checkups at
    ``zeta`` beyond the last filtered segment count as extrapolated.
    """
    used = segs[: len(segs) - holdout] if holdout else segs
    if not used:
        raise ConfigError("validate.holdout leaves no segments")
    model, res, sm = _smooth_cell(theta, spec, used)
    last = sm.zetas[-1]
    rows = []
    for rec in checkups:
        m, P = smoothed_at(sm, rec.zeta)
        qm, qv = query_gp_field(model.gp, m, P, "q_inv", None, False, model.offsets)
        q_mean, q_sd = _q_ah(float(qm[0]), float(qv[0]))
        row = {"zeta_Ah": rec.zeta, "split": "extrapolated" if rec.zeta > last + 1e-9 else "interpolated",
               "q_Ah_true": rec.capacity_ah, "q_Ah_mean": q_mean, "q_Ah_sd": q_sd}
        ip = float(cfg["simulation"]["i_pulse"])
        for soc, r_true in sorted(rec.pulse_r0.items()):
            pts = np.array([[soc, -ip], [soc, ip]])
            rm, rv = query_gp_field(model.gp, m, P, "r0", pts, False, model.offsets)
            row[f"r0_mohm_at{soc:g}_true"] = 1e3 * r_true
            row[f"r0_mohm_at{soc:g}_mean"] = 1e3 * float(rm.mean())
            row[f"r0_mohm_at{soc:g}_sd"] = 1e3 * math.sqrt(max(float(rv.mean()), 0.0))
        rows.append(row)
    return rows, res


def rmse_summary(rows: list[dict]) -> dict:
    """``{quantity: {split: rmse}}`` over capacity and every pulse SOC."""
    keys = ["q_Ah"] + sorted({k[: -len("_true")] for r in rows for k in r if k.startswith("r0_") and k.endswith("_true")})
    out = {}
    for key in keys:
        out[key] = {}
        for split in ("interpolated", "extrapolated"):
            err = [r[f"{key}_mean"] - r[f"{key}_true"] for r in rows if r["split"] == split and f"{key}_true" in r]
            out[key][split] = float(np.sqrt(np.mean(np.square(err)))) if err else None
    return out


def cmd_validate(cfg, out: Outputs, inputs: dict) -> dict:
    data = load_dataset(cfg)
    inputs.update(data.inputs)
    theta, spec = _fitted_model(cfg, inputs)
    holdout = int(cfg["validate"]["holdout"])
    summary = {}
    for c, (segs, recs) in enumerate(zip(data.cells, data.checkups)):
        if not recs:
            raise dataio.DataError(f"cell {c} has no reference tests to validate against")
        rows, _ = validation_table(cfg, theta, spec, segs, recs, holdout)
        header = list(dict.fromkeys(k for r in rows for k in r))
        out.write_text(f"cell{c}_validate.csv", _csv_text(header, [[r.get(k, "") for k in header] for r in rows]))
        summary[f"cell{c}"] = rmse_summary(rows)
    out.write_text("validate_summary.json", dumps({"schema_version": MANIFEST_SCHEMA, "rmse": summary}))
    print(f"{'RMSE':24s} {'interpolated':>14s} {'extrapolated':>14s}")
    for cell, table in summary.items():
        for key, v in table.items():
            cols = [f"{x:14.5g}" if x is not None else f"{'-':>14s}" for x in (v["interpolated"], v["extrapolated"])]
            unit = "Ah" if key == "q_Ah" else "mOhm"
            print(f"{cell + ' ' + key + ' [' + unit + ']':24s} {cols[0]} {cols[1]}")
    return {}


# ---------------------------------------------------------------------------
# Entry point


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="JSON config or a manifest from an earlier run")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value by dot path, e.g. simulation.duration_s=900")
    common.add_argument("--verbose", "-v", action="store_true")
    p = argparse.ArgumentParser(prog="gpecm", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"gpecm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="synthetic cells with known parameters")
    fit = sub.add_parser("fit", parents=[common], help="maximum-likelihood hyperparameters")
    fit.add_argument("--stage", type=int, choices=(1, 2), required=True)
    sub.add_parser("estimate", parents=[common], help="filter and smooth all cycles")
    sub.add_parser("forecast", parents=[common], help="extrapolate to forecast.zeta_star")
    sub.add_parser("validate", parents=[common], help="compare against reference tests")
    return p


def run(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = None
    try:
        cfg = load_config(args.config, args.overrides)
        out = Outputs(cfg["out_dir"])
        inputs: dict = {}
        index: dict = {}
        if args.command == "simulate":
            index = cmd_simulate(cfg, out)
        elif args.command == "fit":
            cmd_fit(cfg, out, args.stage, inputs)
        elif args.command == "estimate":
            cmd_estimate(cfg, out, inputs)
        elif args.command == "forecast":
            cmd_estimate(cfg, out, inputs, forecast_only=True)
        else:
            cmd_validate(cfg, out, inputs)
        stem = args.command + (f"_stage{args.stage}" if args.command == "fit" else "")
        manifest = {
            "schema_version": MANIFEST_SCHEMA,
            "command": args.command,
            "argv": {"stage": getattr(args, "stage", None)},
            "gpecm_version": __version__,
            "config": cfg,
            "inputs": dict(sorted(inputs.items())),
        }
        if index:
            manifest["outputs_index"] = index
        names = list(out.names)
        digests = {n: sha256(out.stage / n) for n in names}
        manifest["outputs"] = dict(sorted(digests.items()))
        out.write_text(f"manifest_{stem}.json", dumps(manifest))
        out.commit()
        return EXIT_OK
    except ConfigError as exc:
        return _fail(out, EXIT_CONFIG, "config error", exc)
    except (dataio.DataError, simulator.SocBoundError) as exc:
        return _fail(out, EXIT_DATA, "data error", exc)
    except (ConditioningError, hyperopt.FitFailed, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(out, EXIT_NUMERIC, "numerical failure", exc)


def _fail(out: Outputs | None, code: int, kind: str, exc: Exception) -> int:
    if out is not None:
        out.abort()
    print(f"gpecm: {kind}: {exc}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())
