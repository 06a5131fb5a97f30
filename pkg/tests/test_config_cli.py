import csv
import json
from pathlib import Path

import numpy as np
import pytest

from gpecm import cli
from gpecm.config import ConfigError, apply_overrides, default_config, dumps, load_config

SMALL = [
    "simulation.n_cells=2", "simulation.n_cycles=3", "simulation.duration_s=300",
    "simulation.cycle_spacing_ah=20", 'simulation.drift={"r0": [0.004], "q_inv": [0.002]}',
    "model.n_z=3", "model.n_r0_z=2", "model.n_r0_i=3",
    "fit.n_random=4", "fit.n_refine=1", "fit.maxiter=2", "fit.lattice_n=1",
]


def sets(items):
    return [a for item in items for a in ("--set", item)]


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


class TestConfig:
    def test_defaults_valid(self):
        cfg = load_config()
        assert cfg == default_config()
        assert cfg["schema_version"] == 1

    def test_overrides_parse_json_then_string(self):
        cfg = apply_overrides(default_config(), ["simulation.duration_s=900", "out_dir=runs/a", "seed=3",
                                                 "report.z_points=[0.9, 0.1]"])
        assert cfg["simulation"]["duration_s"] == 900
        assert cfg["out_dir"] == "runs/a"
        assert cfg["report"]["z_points"] == [0.9, 0.1]

    @pytest.mark.parametrize("bad", ["simulation.nope=1", "nope.x=1", "seed", "simulation.duration_s.x=1"])
    def test_bad_overrides(self, bad):
        with pytest.raises(ConfigError):
            apply_overrides(default_config(), [bad])

    def test_column_map_accepts_new_keys(self):
        cfg = apply_overrides(default_config(), ["data.column_map.current=i_A"])
        assert cfg["data"]["column_map"] == {"current": "i_A"}

    def test_unknown_file_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"simulation": {"durations": 5}}))
        with pytest.raises(ConfigError, match="simulation.durations"):
            load_config(p)

    @pytest.mark.parametrize("override", ["simulation.duration_s=30", "model.n_z=1", "seed=-1",
                                          "fit.n_refine=0", 'fit.box={"lower": {"noise_v": 0}}'])
    def test_validation(self, override):
        with pytest.raises(ConfigError):
            load_config(overrides=[override])

    def test_schema_version_checked(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"schema_version": 7}))
        with pytest.raises(ConfigError):
            load_config(p)

    def test_dumps_canonical(self):
        assert dumps({"b": 1, "a": [1.5]}) == '{\n  "a": [\n    1.5\n  ],\n  "b": 1\n}\n'
        with pytest.raises(ValueError):
            dumps({"x": float("nan")})


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run every command once into a shared directory."""
    root = tmp_path_factory.mktemp("run")
    out = root / "out"
    base = sets(SMALL + [f"out_dir={out}"])
    codes = {"simulate": cli.run(["simulate", *base])}
    data = base + sets([f"data.manifest={out / 'manifest_simulate.json'}"])
    codes["fit1"] = cli.run(["fit", "--stage", "1", *data])
    codes["fit2"] = cli.run(["fit", "--stage", "2", *data])
    codes["estimate"] = cli.run(["estimate", *data])
    codes["forecast"] = cli.run(["forecast", *data, "--set", "forecast.zeta_star=[40, 55]"])
    codes["validate"] = cli.run(["validate", *data, "--set", "validate.holdout=1"])
    return out, codes, data


class TestPipeline:
    def test_all_commands_succeed(self, pipeline):
        _, codes, _ = pipeline
        assert codes == dict.fromkeys(codes, cli.EXIT_OK)

    def test_files_and_no_staging_left(self, pipeline):
        out, _, _ = pipeline
        names = {p.name for p in out.iterdir()}
        for n in ("cell0.csv", "cell1_latent.csv", "stage1.json", "stage2.json", "fit_stage1.jsonl",
                  "cell0_estimate.csv", "cell1_forecast.json", "validate_summary.json",
                  "manifest_simulate.json", "manifest_fit_stage2.json", "manifest_validate.json"):
            assert n in names
        assert not any(n.startswith(".staging") for n in names)

    def test_duration_honoured(self, pipeline):
        out, _, _ = pipeline
        man = json.loads((out / "manifest_simulate.json").read_text())
        for seg in man["outputs_index"]["cells"][0]["segments"]:
            assert seg["row_stop"] - seg["row_start"] == 300
        assert [s["zeta_Ah"] for s in man["outputs_index"]["cells"][0]["segments"]] == [0.0, 20.0, 40.0]

    def test_manifest_digests(self, pipeline):
        out, _, _ = pipeline
        man = json.loads((out / "manifest_estimate.json").read_text())
        assert man["schema_version"] == 1 and man["command"] == "estimate"
        for name, digest in man["outputs"].items():
            assert cli.sha256(out / name) == digest
        assert str(out / "stage2.json") in man["inputs"]

    def test_report_columns(self, pipeline):
        out, _, _ = pipeline
        header, rows = read_csv(out / "cell0_estimate.csv")
        assert header[:3] == ["zeta_Ah", "q_Ah_mean", "q_Ah_sd"]
        assert "r0_mohm_at0.8_-2_mean" in header and "r0_mohm_at0.2_-2_sd" in header
        assert header[-2:] == ["beta_at0.2_mean", "beta_at0.2_sd"]
        assert len(rows) == 3 and all(len(r) == len(header) for r in rows)

    def test_forecast_rows(self, pipeline):
        out, _, _ = pipeline
        _, est = read_csv(out / "cell0_estimate.csv")
        _, fc = read_csv(out / "cell0_forecast.csv")
        assert [float(r[0]) for r in fc] == [40.0, 55.0]
        # the first target is the last cycle, where forecast and estimate coincide
        np.testing.assert_allclose([float(x) for x in fc[0]], [float(x) for x in est[-1]], rtol=1e-9)
        assert float(fc[1][2]) > float(fc[0][2])

    def test_validate_split(self, pipeline):
        out, _, _ = pipeline
        summary = json.loads((out / "validate_summary.json").read_text())["rmse"]
        assert set(summary) == {"cell0", "cell1"}
        for key in ("q_Ah", "r0_mohm_at0.8", "r0_mohm_at0.2"):
            assert summary["cell0"][key]["interpolated"] is not None
            assert summary["cell0"][key]["extrapolated"] is not None
        header, rows = read_csv(out / "cell0_validate.csv")
        assert [r[header.index("split")] for r in rows] == ["interpolated", "interpolated", "extrapolated"]

    def test_stage2_keeps_stage1_group(self, pipeline):
        out, _, _ = pipeline
        s1 = json.loads((out / "stage1.json").read_text())["hyperparameters"]
        s2 = json.loads((out / "stage2.json").read_text())["hyperparameters"]
        for k in ("sigma_q", "gamma_r0_i", "noise_v"):
            assert s1[k] == s2[k]

    def test_manifest_replay_identical(self, pipeline, tmp_path):
        out, _, _ = pipeline
        for man in ("manifest_simulate.json", "manifest_fit_stage1.json", "manifest_estimate.json"):
            other = tmp_path / man
            assert cli.run([json.loads((out / man).read_text())["command"], *(
                ["--stage", "1"] if "fit" in man else []), "--config", str(out / man),
                "--set", f"out_dir={other}"]) == 0
            old = json.loads((out / man).read_text())["outputs"]
            new = json.loads((other / man).read_text())["outputs"]
            assert old == new
            for name in old:
                assert (other / name).read_bytes() == (out / name).read_bytes()


class TestExitCodes:
    def test_config_error(self, tmp_path, capsys):
        assert cli.run(["simulate", "--set", "simulation.bogus=1", "--set", f"out_dir={tmp_path}"]) == 2
        assert "config error" in capsys.readouterr().err

    def test_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{")
        assert cli.run(["simulate", "-c", str(p)]) == cli.EXIT_CONFIG

    def test_unwritable_out_dir(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert cli.run(["simulate", "--set", f"out_dir={blocker / 'sub'}"]) == cli.EXIT_CONFIG

    def test_stage2_without_stage1_leaves_nothing(self, tmp_path, pipeline):
        _, _, data = pipeline
        out = tmp_path / "o"
        rc = cli.run(["fit", "--stage", "2", *data, "--set", f"out_dir={out}"])
        assert rc == cli.EXIT_CONFIG
        assert list(out.iterdir()) == []

    def test_missing_data_file(self, tmp_path):
        rc = cli.run(["fit", "--stage", "1", "--set", f"out_dir={tmp_path}",
                      "--set", f'data.cells=["{tmp_path / "none.csv"}"]'])
        assert rc == cli.EXIT_DATA

    def test_soc_bound(self, tmp_path):
        rc = cli.run(["simulate", "--set", f"out_dir={tmp_path}", "--set", "simulation.duration_s=3600",
                      "--set", "simulation.mean_current=-4", "--set", "simulation.z_init=0.5"])
        assert rc == cli.EXIT_DATA
        assert list(Path(tmp_path).iterdir()) == []

    def test_numeric_failure(self, tmp_path):
        # voltages far outside the OCV range make every likelihood evaluation fail
        p = tmp_path / "cell.csv"
        t = np.arange(400.0)
        i = np.where((t > 50) & (t < 350), -1.0, 0.0)
        p.write_text("t_s,i_A,v_V,temp_C,t_amb_C\n" + "".join(f"{a},{b},9.0,25,25\n" for a, b in zip(t, i)))
        out = tmp_path / "o"
        with pytest.warns(RuntimeWarning):
            rc = cli.run(["fit", "--stage", "1", "--set", f"out_dir={out}", "--set", f'data.cells=["{p}"]',
                          "--set", "data.select_every=1", "--set", "fit.n_random=2", "--set", "fit.n_refine=1",
                          *sets(["model.n_z=2", "model.n_r0_z=2", "model.n_r0_i=2"])])
        assert rc == cli.EXIT_NUMERIC
        assert list(out.iterdir()) == []

    def test_forecast_needs_targets(self, pipeline, tmp_path):
        _, _, data = pipeline
        assert cli.run(["forecast", *data, "--set", f"out_dir={tmp_path}"]) == cli.EXIT_CONFIG

    def test_forecast_before_last_cycle(self, pipeline, tmp_path):
        out, _, data = pipeline
        rc = cli.run(["forecast", *data, "--set", f"fit.stage2={out / 'stage2.json'}",
                      "--set", f"out_dir={tmp_path}", "--set", "forecast.zeta_star=[10]"])
        assert rc == cli.EXIT_CONFIG
