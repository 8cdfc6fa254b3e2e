import json

import pytest

from spectral_etkf.cli import main, parse_grid

SMALL = """
[model]
N = 40
F = 8.0

[observation]
resolution_stride = 2

[filter]
K = 10
rho = 1.05
c = 4.0
sigma = 0.5

[run]
n_cycles = 60
rmse_window = 20
seed = 1
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return path


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


class TestGrid:
    def test_fine_grid_has_no_drift(self):
        g = parse_grid("1:1.2:0.01")
        assert len(g) == 21
        assert g[0] == 1.0 and g[-1] == 1.2 and g[7] == 1.07

    def test_integer_and_list_forms(self):
        assert parse_grid("1:15:1") == [float(v) for v in range(1, 16)]
        assert parse_grid("0.1:1:0.1")[-1] == 1.0
        assert parse_grid("2,4.5") == [2.0, 4.5]

    @pytest.mark.parametrize("text", ["1:0:0.1", "1:2:0", "a:b:c"])
    def test_rejects(self, text):
        with pytest.raises(Exception):
            parse_grid(text)


class TestUsageErrors:
    @pytest.mark.parametrize(
        "argv",
        [
            ["bogus"],
            [],
            ["run", "--config", "missing.toml"],
            ["run"],
            ["tune", "--config", "CONFIG", "--rho", "x"],
            ["run", "--config", "CONFIG", "--frobnicate"],
            ["tune", "--config", "CONFIG", "--jobs", "0"],
        ],
    )
    def test_exit_one(self, argv, config, tmp_path, capsys):
        argv = [str(config) if a == "CONFIG" else a for a in argv] + ["--out", str(tmp_path / "o")]
        assert main(argv) == 1
        assert capsys.readouterr().err

    def test_bad_config_key(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text("[filter]\nKK = 3\n")
        assert main(["run", "--config", str(path), "--out", str(tmp_path)]) == 1
        assert "KK" in capsys.readouterr().err


class TestCommands:
    def test_run(self, config, tmp_path):
        out = tmp_path / "results"
        assert main(["run", "--config", str(config), "--out", str(out)]) == 0
        assert (out / "rmse.csv").read_text().startswith("cycle,time,rmse,spread\n")
        m = manifest(out)
        assert m["seed"] == 1 and m["status"] == "ok" and m["version"]
        assert m["config"]["filter"]["sigma"] == 0.5
        assert m["wall_time"] >= 0

    def test_seed_override_and_byte_identical(self, config, tmp_path):
        a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        for out, seed in [(a, "4"), (b, "4"), (c, "5")]:
            assert main(["run", "--config", str(config), "--out", str(out), "--seed", seed]) == 0
        assert (a / "rmse.csv").read_bytes() == (b / "rmse.csv").read_bytes()
        assert (a / "rmse.csv").read_bytes() != (c / "rmse.csv").read_bytes()
        assert manifest(a)["seed"] == 4

    def test_divergence_exit_two_with_partial_output(self, tmp_path):
        path = tmp_path / "blowup.toml"
        path.write_text(SMALL.replace("sigma = 0.5", "sigma = 0.5\ninitial_spread = 1000.0"))
        out = tmp_path / "o"
        assert main(["run", "--config", str(path), "--out", str(out)]) == 2
        assert (out / "rmse.csv").exists()
        assert manifest(out)["status"] == "diverged"

    def test_truth(self, config, tmp_path):
        assert main(["truth", "--config", str(config), "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "truth.csv").read_text().splitlines()
        assert len(lines) == 61 and lines[0].split(",")[:3] == ["cycle", "time", "u_0"]

    def test_tune_jobs_determinism(self, config, tmp_path):
        grids = ["--rho", "1.02:1.1:0.08", "--c", "3,8", "--sigma", "0.3,0.8"]
        for jobs in ("1", "2"):
            out = tmp_path / f"j{jobs}"
            assert main(["tune", "--config", str(config), "--out", str(out), "--jobs", jobs] + grids) == 0
        assert (tmp_path / "j1" / "tuning.csv").read_bytes() == (tmp_path / "j2" / "tuning.csv").read_bytes()
        assert (tmp_path / "j1" / "best.toml").read_text() == (tmp_path / "j2" / "best.toml").read_text()
        assert manifest(tmp_path / "j1")["best_rmse"] > 0

    def test_spectrum(self, config, tmp_path):
        argv = ["spectrum", "--config", str(config), "--out", str(tmp_path), "--sizes", "4,8", "--time", "0.3"]
        assert main(argv) == 0
        for name in ["spectrum_K4_raw.csv", "spectrum_K4_smoothed.csv", "spectrum_K8_raw.csv"]:
            assert (tmp_path / name).read_text().startswith("wavenumber,power\n")

    def test_diagnose(self, config, tmp_path):
        argv = ["diagnose", "--config", str(config), "--out", str(tmp_path), "--times", "1.5,3"]
        assert main(argv) == 0
        assert (tmp_path / "diagnostics.csv").read_text().startswith("time,component,variance_ratio,offdiag_ratio\n")

    def test_diagnose_off_grid_time_is_usage_error(self, config, tmp_path):
        argv = ["diagnose", "--config", str(config), "--out", str(tmp_path), "--times", "1.0"]
        assert main(argv) == 1
