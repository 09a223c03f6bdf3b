"""
Integration tests for the command-line runner: exit codes, written files,
reproducible summaries and the Fock-cutoff gate.
"""

import pytest
import json
import math
import sys
import os

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

import main_runner
from main_runner import EXIT_CONFIG, EXIT_GATE, EXIT_OK, EXIT_SOLVER, TRANSMITTED_CHANNELS, main
from utils.results_writer import load_series, load_summary, series_path, summary_path

CONFIG_DIR = os.path.join(os.path.dirname(__file__), '..', 'configs')

EMPTY_PARAMS = """\
[params]
g_a = 0
g_b = 0
kappa_a = 1
kappa_b = 1
gamma_a = 0.2
theta_a = 0
delta_cap = 0
delta_small = 0
eps_a = 0.1
eps_b = sqrt(0.1)
n_a = 1
n_b = {n_b}
"""


def write_config(tmp_path, body, n_b=8, name="scenario.cfg"):
    path = tmp_path / name
    path.write_text(EMPTY_PARAMS.format(n_b=n_b) + body, encoding="utf-8")
    return str(path)


class TestCommands:
    """Test suite for the validate and scenarios commands."""

    @pytest.mark.unit
    def test_scenarios_listing(self, capsys):
        """Test that every scenario is listed with its blocks."""
        assert main(["scenarios"]) == EXIT_OK
        out = capsys.readouterr().out

        for name in main_runner.RUNNERS:
            assert name in out, f"Scenario {name} should be listed"

    @pytest.mark.unit
    def test_validate_echoes_settings(self, capsys):
        """Test that validate prints resolved settings with defaults marked."""
        code = main(["validate", os.path.join(CONFIG_DIR, "table1.cfg")])
        out = capsys.readouterr().out

        assert code == EXIT_OK, "A valid config exits 0"
        assert "params.g_b = 10.0" in out, "Explicit values are echoed"
        assert "(default)" in out, "Defaults are marked"

    @pytest.mark.unit
    def test_validate_warns_on_dark_band(self, tmp_path, capsys):
        """Test that a dark-band optimiser start is reported as a warning."""
        path = write_config(tmp_path, "\n[run]\nscenario = optimize\n\n[optimize]\nfree = g_a\n")

        assert main(["validate", path]) == EXIT_OK
        assert "[WARNING]" in capsys.readouterr().out, "Θa + δ inside the band should warn"

    @pytest.mark.unit
    def test_missing_config_exit_code(self, tmp_path):
        """Test that a missing config maps to the config exit code."""
        assert main(["run", str(tmp_path / "absent.cfg")]) == EXIT_CONFIG

    @pytest.mark.unit
    def test_malformed_config_exit_code(self, tmp_path, capsys):
        """Test that schema violations map to the config exit code with a line number."""
        path = write_config(tmp_path, "\n[run]\nscenario = steady\nspeed = fast\n\n[steady]\n")

        assert main(["run", path]) == EXIT_CONFIG
        assert "line 17" in capsys.readouterr().out, "The offending line is reported"


class TestRun:
    """Test suite for scenario runs."""

    @pytest.mark.integration
    def test_empty_cavity_steady(self, tmp_path):
        """Test the bundled empty-cavity scenario and its gate."""
        out = str(tmp_path / "empty")
        code = main(["run", os.path.join(CONFIG_DIR, "empty-cavity.cfg"), "--out", out, "--fock-nb", "6"])
        summary = load_summary(summary_path(out))

        assert code == EXIT_OK, "Converged run exits 0"
        assert abs(summary["metrics"]["b_photons"] - 0.1) < 1e-6, "Empty cavity holds (E_b/κ)² photons"
        assert summary["fock_gate"]["passed"] is True, "Gate passes for a weakly driven cavity"
        assert summary["schema_version"] == 1, "Summary carries its schema version"

    @pytest.mark.integration
    def test_rerun_is_byte_identical(self, tmp_path):
        """Test that a seeded rerun rewrites identical files apart from the wall-time line."""
        path = write_config(
            tmp_path,
            "\n[run]\nscenario = mc\nseed = 11\nfock_convergence_check = false\n\n"
            "[mc]\ndrives = a\nt_end = 20\npoints = 11\ntrajectories = 6\ninitial = H00\n",
        )
        out = str(tmp_path / "repeat")
        files = [summary_path(out), series_path(out, "ensemble"), series_path(out, "jumps")]

        def snapshot():
            assert main(["run", path, "--out", out]) == EXIT_OK, "Run succeeds"
            contents = []
            for name in files:
                with open(name, "rb") as handle:
                    lines = handle.read().splitlines(keepends=True)
                contents.append(b"".join(line for line in lines if b'"wall_time_s"' not in line))
            return contents

        first = snapshot()
        second = snapshot()
        for name, a, b in zip(files, first, second):
            assert a == b, f"{os.path.basename(name)} should be byte-identical across reruns"

    @pytest.mark.integration
    def test_gate_failure_exit_code(self, tmp_path):
        """Test that an unconverged cutoff fails the gate but still writes results."""
        path = write_config(
            tmp_path,
            "\n[run]\nscenario = steady\nfock_gate_step = 1\n\n[steady]\ndrives = a\nsupport = G\n",
            n_b=2,
        )
        out = str(tmp_path / "gate")

        assert main(["run", path, "--out", out]) == EXIT_GATE
        summary = load_summary(summary_path(out))
        assert summary["fock_gate"]["passed"] is False, "Gate failure is recorded"

    @pytest.mark.integration
    def test_solver_failure_exit_code(self, tmp_path):
        """Test that a degenerate steady state maps to the solver exit code."""
        path = write_config(
            tmp_path, "\n[run]\nscenario = steady\nfock_convergence_check = false\n\n[steady]\ndrives = off\n"
        )

        assert main(["run", path, "--out", str(tmp_path / "degenerate")]) == EXIT_SOLVER

    @pytest.mark.integration
    def test_mc_writes_series(self, tmp_path):
        """Test the ensemble and jump CSVs of a small Monte Carlo run."""
        path = write_config(
            tmp_path,
            "\n[run]\nscenario = mc\nseed = 3\nfock_convergence_check = false\n\n"
            "[mc]\ndrives = off\nt_end = 5\npoints = 6\ntrajectories = 3\ninitial = G00\n",
        )
        out = str(tmp_path / "mc")

        assert main(["run", path, "--out", out, "--trajectories", "4"]) == EXIT_OK
        ensemble = load_series(series_path(out, "ensemble"))
        jumps = load_series(series_path(out, "jumps"))
        summary = load_summary(summary_path(out))

        assert len(ensemble) == 6, "One row per grid time"
        assert ensemble.columns[0] == "t_gamma_b", "Time column first"
        assert set(jumps["channel"]).issubset(TRANSMITTED_CHANNELS), "Only transmitted channels are kept"
        assert summary["metrics"]["trajectories"] == 4, "Trajectory override applied"

    @pytest.mark.slow
    @pytest.mark.integration
    def test_table1_switch_times(self, tmp_path):
        """Test the bundled switch-times scenario at cutoffs (5, 5) with the +2 gate."""
        out = str(tmp_path / "table1")

        assert main(["run", os.path.join(CONFIG_DIR, "table1.cfg"), "--out", out]) == EXIT_OK
        summary = load_summary(summary_path(out))
        metrics, gate = summary["metrics"], summary["fock_gate"]

        assert abs(metrics["D"] - 0.908) <= 0.005, "Contrast at the operating point"
        assert abs(metrics["T_on"] - 220.0) <= 0.05 * 220.0, "T_on within 5%"
        assert abs(metrics["T_off"] - 2390.0) <= 0.05 * 2390.0, "T_off within 5%"
        assert math.isclose(metrics["photons_during_T_on"]["a"], 0.01 * metrics["T_on"]), \
            "a-drive photons are E_a²/(2κ_in) T_on"
        assert gate["base_cutoffs"] == [5, 5] and gate["raised_cutoffs"] == [7, 7], "Gate at (5, 5) -> (7, 7)"
        assert gate["passed"] and max(gate["deltas"].values()) < 1e-4, f"Gate deltas {gate['deltas']}"
        assert os.path.exists(series_path(out, "on_transient")), "Transient CSV written"


def bundled_copy(tmp_path, name, replacements=()):
    """Copy a bundled config into tmp_path with literal text replacements."""
    with open(os.path.join(CONFIG_DIR, name), encoding="utf-8") as handle:
        text = handle.read()
    for old, new in replacements:
        assert old in text, f"{name} should contain {old!r}"
        text = text.replace(old, new)
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


RELAY_SCHEDULE = "schedule = a:0-2000, c:2000-4000, off:4000-6000, a:6000-8000, off:8000-10000"
GATE_OFF = ("fock_convergence_check = true", "fock_convergence_check = false")


class TestBundledRuns:
    """Test suite running the shipped configs through the command line."""

    @pytest.mark.slow
    @pytest.mark.integration
    def test_relay_sets_and_resets(self, tmp_path):
        """Test that relay.cfg pumps |G> during the a-drive and |H> during the c-field."""
        path = bundled_copy(tmp_path, "relay.cfg", [
            (RELAY_SCHEDULE, "schedule = a:0-2000, c:2000-4000"), ("points = 1001", "points = 41"), GATE_OFF,
        ])
        out = str(tmp_path / "relay")

        assert main(["run", path, "--out", out, "--fock-na", "3", "--fock-nb", "3"]) == EXIT_OK
        frame = load_series(series_path(out, "relay"))
        at = frame.set_index("t_gamma_b")

        assert at.loc[2000.0, "pop_G"] >= 0.9, "a-drive sets the reflecting state"
        assert at.loc[4000.0, "pop_H"] >= 0.9, "c-field resets to the transmitting state"

    @pytest.mark.slow
    @pytest.mark.integration
    @pytest.mark.parametrize("name, replacements", [
        ("empty-cavity.cfg", []),
        ("relay.cfg", [(RELAY_SCHEDULE, "schedule = a:0-200, c:200-400"), ("points = 1001", "points = 5")]),
        ("fig6-sweep.cfg", [("budget = 200", "budget = 20"), ("restarts = 2", "restarts = 0"),
                            ("switching_times = true", "switching_times = false")]),
    ])
    def test_reference_config_passes_gate(self, tmp_path, name, replacements):
        """Test the Fock gate at cutoffs +2 on the reference configs (table1.cfg runs above)."""
        path = bundled_copy(tmp_path, name, replacements)
        out = str(tmp_path / "gated")

        assert main(["run", path, "--out", out]) == EXIT_OK, f"{name} should pass the gate"
        gate = load_summary(summary_path(out))["fock_gate"]
        assert gate["passed"] and max(gate["deltas"].values()) < 1e-4, f"{name} gate deltas {gate['deltas']}"

    @pytest.mark.slow
    @pytest.mark.integration
    @pytest.mark.parametrize("name, replacements", [
        ("gb-sweep-gamma-equal.cfg", [("budget = 200", "budget = 6"), ("restarts = 2", "restarts = 0"),
                                      ("values = 5, 10, 20", "values = 5, 10")]),
        ("ga-scan.cfg", [("budget = 60", "budget = 3"), ("restarts = 1", "restarts = 0"),
                         ("values = 0.6, 1.0, 1.3784, 1.8, 2.5", "values = 1.0, 1.3784")]),
        ("gb-switching-times.cfg", [("budget = 200", "budget = 6"), ("restarts = 2", "restarts = 0"),
                                    ("values = 5, 10, 20, 40", "values = 10")]),
        ("device-projection.cfg", [("budget = 300", "budget = 6"), ("restarts = 2", "restarts = 0")]),
    ])
    def test_extra_config_runs(self, tmp_path, name, replacements):
        """Test a shortened run of each supplementary config."""
        path = bundled_copy(tmp_path, name, [*replacements, GATE_OFF])
        out = str(tmp_path / "extra")

        assert main(["run", path, "--out", out, "--fock-na", "3", "--fock-nb", "4"]) == EXIT_OK
        metrics = load_summary(summary_path(out))["metrics"]
        if "points" in metrics:
            for row in metrics["points"]:
                assert row["error"] == "", f"{name}: sweep point failed: {row['error']}"
                assert 0.0 <= row["D"] <= 1.0 + 1e-9, f"{name}: contrast out of range"
            if name == "gb-switching-times.cfg":
                assert metrics["points"][0]["T_on"] > 0.0, "Switching times are reported"
        else:
            assert 0.0 <= metrics["D"] <= 1.0 + 1e-9, f"{name}: contrast out of range"
            assert set(metrics["optimum"]) == {"theta_a", "g_a", "delta_small", "delta_cap"}, \
                "The full operating point is reported"


class TestResultsWriter:
    """Test suite for the JSON and CSV writers."""

    @pytest.mark.unit
    def test_non_finite_and_complex_values(self, tmp_path):
        """Test that NaN becomes null and complex numbers become re/im pairs."""
        from utils.results_writer import write_summary

        path = write_summary(str(tmp_path / "s"), {"x": float("nan"), "z": 1 + 2j})
        with open(path, encoding="utf-8") as handle:
            data = json.load(handle)

        assert data["x"] is None, "NaN is not valid JSON"
        assert data["z"] == {"re": 1.0, "im": 2.0}, "Complex values are split"

    @pytest.mark.unit
    def test_schema_line_checked(self, tmp_path):
        """Test that series without the schema line are refused."""
        path = tmp_path / "bad.csv"
        path.write_text("t_gamma_b,x\n0,1\n", encoding="utf-8")

        with pytest.raises(ValueError):
            load_series(str(path))

    @pytest.mark.unit
    def test_missing_summary(self, tmp_path):
        """Test that a missing summary loads as None."""
        assert load_summary(str(tmp_path / "none_summary.json")) is None
