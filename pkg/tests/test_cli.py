"""Config grammar, file emission, exit codes, reproducibility."""

import os

import numpy as np
import pytest

from bfflow import cli
from bfflow.cli import ConfigError, parse_config

MINIMAL = """
[grid]
n = 16
[forcing]
kind = zero
"""


class TestParser:
    def test_minimal_with_defaults(self):
        sc = parse_config(MINIMAL)
        assert sc["grid", "n"] == 16
        assert sc["grid", "dim"] == 2
        assert sc["solver", "scheme"] == "rk4"
        g = sc.grid()
        assert np.allclose(sc.medium().entries, np.eye(2))
        assert sc.solver(g, sc.medium()).dt > 0

    def test_growth_exponent_constraint_named(self):
        with pytest.raises(ConfigError, match=r"\(0, 2\]"):
            parse_config("[nonlinearity]\nl = 3.0\n")

    def test_unknown_key_with_line_number(self):
        with pytest.raises(ConfigError, match="line 3"):
            parse_config("[solver]\ndt = 0.1\ndtt = 0.1\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config("[solvers]\ndt = 0.1\n")

    def test_key_outside_section(self):
        with pytest.raises(ConfigError, match="outside"):
            parse_config("dt = 0.1\n")

    def test_malformed_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config("[solver]\ndt 0.1\n")

    def test_comments_and_case_sensitivity(self):
        sc = parse_config("[solver]\ndt = 0.25  # quarter step\n")
        assert sc["solver", "dt"] == 0.25
        with pytest.raises(ConfigError):
            parse_config("[solver]\nDT = 0.25\n")

    def test_medium_rows_and_diag(self):
        sc = parse_config("[medium]\nrows = 2 0.5; 0.5 1\n")
        assert sc.medium().eigmin > 0
        sc = parse_config("[medium]\ndiag = 1, 2\n")
        assert sc.medium().eigmax == 2.0
        with pytest.raises(ConfigError):
            parse_config("[medium]\nrows = 1 0; 0 -1\n").medium()

    def test_default_config_text_parses(self):
        parse_config(cli.DEFAULT_CONFIG)


class TestRunScenario:
    def test_simulate_zero_everything(self, tmp_path):
        sc = parse_config("""
[grid]
n = 8
[run]
t_max = 0.05
snapshot_stride = 0.01
""")
        code = cli.run_scenario(sc, "simulate", tmp_path)
        assert code == 0
        lines = (tmp_path / "energies.csv").read_text().splitlines()
        assert lines[0].startswith("t [time],e_plain [energy]")
        data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
        assert np.all(data[:, 1:] == 0.0)
        summary = (tmp_path / "summary.txt").read_text()
        assert "status = PASS" in summary

    def test_oracle_subcommand(self, tmp_path):
        sc = parse_config("[grid]\nn = 8\n[medium]\ndiag = 1, 2\n")
        code = cli.run_scenario(sc, "oracle", tmp_path)
        assert code == 0
        rows = (tmp_path / "oracle.csv").read_text().splitlines()[1:]
        errs = [float(r.split(",")[1]) for r in rows]
        assert errs[0] / errs[1] >= 12.0 and errs[1] / errs[2] >= 12.0

    def test_spectrum_subcommand(self, tmp_path):
        sc = parse_config("""
[grid]
n = 8
[medium]
diag = 1, 2
[scenario]
deltas = 0, 0.5, 1
""")
        code = cli.run_scenario(sc, "spectrum", tmp_path, svg=True)
        assert code == 0
        decay = (tmp_path / "decay.csv").read_text().splitlines()[1:]
        assert all(float(r.split(",")[1]) < 0 for r in decay)
        assert (tmp_path / "spectrum.svg").exists()
        assert "note_delta_0.5" in (tmp_path / "summary.txt").read_text()

    def test_criterion_failure_exit_code(self, tmp_path):
        # an unreachable residual threshold flips the criterion to FAIL
        sc = parse_config("""
[grid]
n = 8
[nonlinearity]
alpha = 1
beta = 1
l = 2
[forcing]
kind = fixed_random
seed = 9
[initial]
kind = smooth
[run]
t_max = 0.1
[scenario]
residual_tol = 1e-30
""")
        code = cli.run_scenario(sc, "simulate", tmp_path)
        assert code == 1
        assert "pass_residual = FAIL" in (tmp_path / "summary.txt").read_text()

    def test_runtime_error_exit_code(self, tmp_path):
        sc = parse_config("""
[grid]
n = 8
[nonlinearity]
alpha = 1
beta = 1
l = 2
[initial]
kind = smooth
amplitude = 400
[run]
t_max = 0.5
""")
        with np.errstate(over="ignore", invalid="ignore"):
            code = cli.run_scenario(sc, "simulate", tmp_path)
        assert code == 2
        assert "RUNTIME_ERROR" in (tmp_path / "summary.txt").read_text()

    def test_main_config_error_exit_3(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[solver]\ndtt = 1\n")
        assert cli.main(["simulate", "--config", str(bad)]) == 3
        assert cli.main(["simulate", "--config", str(tmp_path / "nope.cfg")]) == 3

    def test_main_usage_error_exit_3(self, capsys):
        assert cli.main(["not-a-subcommand", "--config", "x"]) == 3
        assert cli.main(["simulate"]) == 3  # missing --config
        capsys.readouterr()

    def test_bit_identical_reruns(self, tmp_path):
        text = """
[grid]
n = 8
[nonlinearity]
alpha = 1
beta = 1
l = 2
[forcing]
kind = fixed_random
seed = 9
[initial]
kind = smooth
[run]
t_max = 0.1
snapshot_stride = 0.02
"""
        sc = parse_config(text)
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.run_scenario(sc, "simulate", a) == 0
        assert cli.run_scenario(sc, "simulate", b) == 0
        assert (a / "energies.csv").read_bytes() == (b / "energies.csv").read_bytes()

    def test_simulate_with_convection(self, tmp_path):
        sc = parse_config("""
[grid]
n = 8
[nonlinearity]
alpha = 1
beta = 1
l = 2
[initial]
kind = smooth
[run]
t_max = 0.1
[scenario]
convective = on
""")
        assert cli.run_scenario(sc, "simulate", tmp_path) == 0

    def test_file_forcing_roundtrip(self, tmp_path):
        from bfflow.cli import make_forcing
        from bfflow.grid import Grid
        g = Grid(2, 8)
        arr = np.arange(2 * 64, dtype=float).reshape(2, 8, 8)
        path = tmp_path / "g.npy"
        np.save(path, arr)
        f = make_forcing(g, "file", seed=0, amplitude=1.0, path=str(path))
        assert np.array_equal(f.base.values, arr)

    def test_svg_never_affects_exit(self, tmp_path):
        sc = parse_config("[grid]\nn = 8\n[run]\nt_max = 0.05\n")
        c1 = cli.run_scenario(sc, "simulate", tmp_path / "x", svg=False)
        c2 = cli.run_scenario(sc, "simulate", tmp_path / "y", svg=True)
        assert c1 == c2
        assert (tmp_path / "y" / "energies.svg").exists()

    def test_attractor_threads_match_serial(self, tmp_path):
        text = """
[grid]
n = 8
[nonlinearity]
alpha = 1
beta = 1
l = 2
[forcing]
kind = band_random
seed = 5
[scenario]
ensemble_size = 4
[run]
t_max = 2.0
snapshot_stride = 0.5
"""
        sc = parse_config(text)
        c1 = cli.run_scenario(sc, "attractor", tmp_path / "serial", threads=1)
        c2 = cli.run_scenario(sc, "attractor", tmp_path / "par", threads=2)
        assert c1 == c2
        s = (tmp_path / "serial" / "attractor.csv").read_text()
        p = (tmp_path / "par" / "attractor.csv").read_text()
        assert s == p

    def test_unknown_subcommand(self, tmp_path):
        sc = parse_config(MINIMAL)
        with pytest.raises(ConfigError):
            cli.run_scenario(sc, "simulatee", tmp_path)


class TestFileFormats:
    def test_csv_lf_endings_and_decimal_points(self, tmp_path):
        path = tmp_path / "t.csv"
        cli.write_csv(path, ["a [x]", "b [y]"], [(1, 2.5), (3, 0.1)])
        raw = path.read_bytes()
        assert b"\r" not in raw
        assert raw.decode().splitlines()[1] == "1,2.5"

    def test_svg_is_valid_xml(self, tmp_path):
        import xml.etree.ElementTree as ET
        path = tmp_path / "t.svg"
        cli.write_svg(path, "demo", np.linspace(0, 1, 5),
                      {"v": np.linspace(1, 2, 5)})
        root = ET.fromstring(path.read_text())
        assert root.tag.endswith("svg")
