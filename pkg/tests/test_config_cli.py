import os

import numpy as np
import pytest

from ionctrl.cli import main
from ionctrl.config import (
    ConfigError,
    dump_config,
    load_config,
    load_pulse,
    preset_names,
    save_pulse,
)
from ionctrl.dynamics import PulseProgram

MHZ = 2 * np.pi * 1e6


class TestPresets:
    def test_yb2_3us_values(self):
        cfg = load_config("yb2_3us")
        chain = cfg.chain
        assert chain.n_ions == 2
        assert chain.mode_freqs[0] == pytest.approx(2 * np.pi * 1e6, rel=1e-12)
        assert chain.mode_freqs[1] == pytest.approx(np.sqrt(3) * 2 * np.pi * 1e6, rel=1e-12)
        np.testing.assert_allclose(chain.lamb_dicke[:, 0], 0.136)
        assert chain.lamb_dicke[0, 1] == pytest.approx(0.136 / 3 ** 0.25, rel=1e-12)
        assert chain.lamb_dicke[1, 1] == pytest.approx(-0.136 / 3 ** 0.25, rel=1e-12)
        t = cfg.pulse_template
        assert t.duration == pytest.approx(3e-6, rel=1e-12)
        assert t.tau == pytest.approx(15e-9, rel=1e-12)
        np.testing.assert_allclose(t.drive_freqs, np.array([1, 2, 3]) * chain.mode_freqs[1], rtol=1e-12)
        np.testing.assert_allclose(cfg.thermal.nbar, [0.1, 0.1])
        assert cfg.robustness is not None
        np.testing.assert_allclose(
            cfg.robustness.phase_samples, [0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4], rtol=1e-12
        )
        assert cfg.optimizer.amp_bound == pytest.approx(7.0 * MHZ, rel=1e-12)

    def test_yb2_1us_values(self):
        cfg = load_config("yb2_1us")
        t = cfg.pulse_template
        assert t.duration == pytest.approx(1e-6, rel=1e-12)
        assert t.tau == pytest.approx(5e-9, rel=1e-12)
        np.testing.assert_allclose(t.drive_freqs, np.array([1, 2]) * cfg.chain.mode_freqs[0], rtol=1e-12)
        np.testing.assert_allclose(cfg.thermal.nbar, [0.0, 0.0])
        assert cfg.optimizer.amp_bound is None

    def test_all_presets_load(self):
        for name in preset_names():
            load_config(name)


class TestLoadConfig:
    def write(self, tmp_path, text):
        path = tmp_path / "run.ini"
        path.write_text(text)
        return str(path)

    def base_text(self):
        return load_config.__wrapped__ if False else (
            "[chain]\nn_ions = 1\nmode_freqs_mhz = 1.0\nlamb_dicke_row_1 = 0.1\nfock_cutoff = 3\n"
            "[pulse]\ngate_time_us = 1.0\ntime_step_ns = 10.0\ndrive_freqs_mhz = 1.0\n"
            "[target]\ngate = x90\n[thermal]\nnbar = 0.0\n"
        )

    def test_missing_time_step_names_field(self, tmp_path):
        text = self.base_text().replace("time_step_ns = 10.0\n", "")
        with pytest.raises(ConfigError) as err:
            load_config(self.write(tmp_path, text))
        assert "time_step_ns" in str(err.value)

    def test_all_problems_reported(self, tmp_path):
        text = self.base_text().replace("nbar = 0.0", "nbar = -1.0")
        text = text.replace("gate = x90", "gate = nosuch")
        with pytest.raises(ConfigError) as err:
            load_config(self.write(tmp_path, text))
        msg = str(err.value)
        assert "nbar" in msg and "nosuch" in msg

    def test_non_integer_slice_count(self, tmp_path):
        text = self.base_text().replace("time_step_ns = 10.0", "time_step_ns = 7.0")
        with pytest.raises(ConfigError, match="slice count"):
            load_config(self.write(tmp_path, text))

    def test_unparsable_number(self, tmp_path):
        text = self.base_text().replace("gate_time_us = 1.0", "gate_time_us = abc")
        with pytest.raises(ConfigError, match="gate_time_us"):
            load_config(self.write(tmp_path, text))

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            load_config("/nonexistent/path.ini")

    def test_round_trip_semantics(self, tmp_path):
        cfg = load_config("yb2_3us")
        text = dump_config(cfg)
        cfg2 = load_config(self.write(tmp_path, text))
        np.testing.assert_array_equal(cfg.chain.mode_freqs, cfg2.chain.mode_freqs)
        np.testing.assert_array_equal(cfg.chain.lamb_dicke, cfg2.chain.lamb_dicke)
        assert cfg.chain.fock_cutoff == cfg2.chain.fock_cutoff
        assert cfg.pulse_template.tau == cfg2.pulse_template.tau
        assert cfg.pulse_template.n_slices == cfg2.pulse_template.n_slices
        np.testing.assert_array_equal(cfg.pulse_template.drive_freqs, cfg2.pulse_template.drive_freqs)
        np.testing.assert_array_equal(cfg.thermal.nbar, cfg2.thermal.nbar)
        assert cfg.optimizer == cfg2.optimizer
        assert cfg.robustness == cfg2.robustness
        assert cfg.sweep == cfg2.sweep


class TestPulseFile:
    def test_bitwise_round_trip_random(self, tmp_path):
        rng = np.random.default_rng(0)
        for trial in range(5):
            pulse = PulseProgram(
                drive_freqs=np.sort(rng.uniform(0.5, 10.0, 3)) * MHZ,
                tau=rng.uniform(1, 50) * 1e-9,
                amp=rng.standard_normal((3, 7)) * 5 * MHZ,
                spin_phase=rng.standard_normal((3, 7)),
                motional_phase=rng.standard_normal((3, 7)),
                global_phase_offset=rng.uniform(0, 2 * np.pi),
            )
            path = tmp_path / f"pulse{trial}.csv"
            save_pulse(pulse, path)
            loaded = load_pulse(path)
            assert loaded.tau == pulse.tau
            np.testing.assert_array_equal(loaded.drive_freqs, pulse.drive_freqs)
            np.testing.assert_array_equal(loaded.amp, pulse.amp)
            np.testing.assert_array_equal(loaded.spin_phase, pulse.spin_phase)
            np.testing.assert_array_equal(loaded.motional_phase, pulse.motional_phase)
            assert loaded.global_phase_offset == pulse.global_phase_offset

    def test_save_is_stable(self, tmp_path):
        rng = np.random.default_rng(1)
        pulse = PulseProgram([1 * MHZ], 1e-8, rng.standard_normal((1, 4)) * MHZ,
                             np.zeros((1, 4)), np.zeros((1, 4)))
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        save_pulse(pulse, p1)
        save_pulse(load_pulse(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_bad_version(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("not a pulse file\n")
        with pytest.raises(ValueError, match="version"):
            load_pulse(path)

    def test_rejects_truncated_body(self, tmp_path):
        pulse = PulseProgram.zeros([1 * MHZ], 1e-8, 4)
        path = tmp_path / "p.csv"
        save_pulse(pulse, path)
        lines = path.read_text().strip().split("\n")
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(ValueError, match="rows"):
            load_pulse(path)


class TestCli:
    def toy_run(self, tmp_path, seed=None, extra=()):
        out = str(tmp_path / "out")
        args = ["optimize", "--config", "toy1", "--out", out]
        if seed is not None:
            args += ["--seed", str(seed)]
        code = main(args + list(extra))
        return code, out

    def test_optimize_writes_artifacts(self, tmp_path, capsys):
        code, out = self.toy_run(tmp_path, seed=1)
        assert code == 0
        assert os.path.exists(os.path.join(out, "pulse.csv"))
        assert os.path.exists(os.path.join(out, "report.txt"))
        assert os.path.exists(os.path.join(out, "config_resolved.ini"))
        report = open(os.path.join(out, "report.txt")).read()
        assert "termination = goal_reached" in report

    def test_optimize_deterministic_bytes(self, tmp_path):
        code1, out1 = self.toy_run(tmp_path / "r1", seed=3)
        code2, out2 = self.toy_run(tmp_path / "r2", seed=3)
        assert code1 == code2 == 0
        b1 = open(os.path.join(out1, "pulse.csv"), "rb").read()
        b2 = open(os.path.join(out2, "pulse.csv"), "rb").read()
        assert b1 == b2

    def test_evaluate_round_trip(self, tmp_path, capsys):
        code, out = self.toy_run(tmp_path, seed=1)
        report = dict(
            line.split(" = ")
            for line in open(os.path.join(out, "report.txt")).read().splitlines()
            if " = " in line
        )
        capsys.readouterr()
        code = main(["evaluate", "--config", "toy1", "--pulse", os.path.join(out, "pulse.csv"),
                     "--out", out])
        assert code == 0
        printed = capsys.readouterr().out
        nominal = float([l for l in printed.splitlines() if l.startswith("nominal_fidelity")][0].split(" = ")[1])
        assert nominal == pytest.approx(float(report["final_fidelity"]), abs=1e-12)

    def test_sweep_rows(self, tmp_path, capsys):
        code, out = self.toy_run(tmp_path, seed=1)
        for axis, expected in (("phase", 8), ("frequency", 5), ("thermal", 5)):
            code = main(["sweep", "--config", "toy1", "--pulse", os.path.join(out, "pulse.csv"),
                         "--out", out, "--axis", axis])
            assert code == 0
            lines = open(os.path.join(out, f"sweep_{axis}.csv")).read().strip().splitlines()
            assert len(lines) == expected + 1

    def test_trajectory_zero_pulse(self, tmp_path, capsys):
        out = str(tmp_path / "out")
        os.makedirs(out)
        pulse_path = os.path.join(out, "zero.csv")
        save_pulse(PulseProgram.zeros([1 * MHZ], 10e-9, 200), pulse_path)
        code = main(["trajectory", "--config", "toy1", "--pulse", pulse_path, "--out", out,
                     "--stride", "10"])
        assert code == 0
        rows = open(os.path.join(out, "trajectory.csv")).read().strip().splitlines()[1:]
        xs = np.array([float(r.split(",")[2]) for r in rows])
        np.testing.assert_allclose(xs, 0.0, atol=1e-12)

    def test_config_error_exit_code(self, capsys):
        assert main(["evaluate", "--config", "/nope.ini", "--pulse", "x.csv"]) == 1

    def test_goal_unreachable_exit_code(self, tmp_path, capsys):
        out = str(tmp_path / "out")
        cfg_text = open_preset_with(max_iters="2", fidelity_goal="1.0")
        path = tmp_path / "cfg.ini"
        path.write_text(cfg_text)
        code = main(["optimize", "--config", str(path), "--out", out])
        assert code == 2

    def test_io_error_exit_code(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        out = str(blocker / "sub")  # path under a regular file
        code = main(["optimize", "--config", "toy1", "--out", out, "--seed", "1"])
        assert code == 3


def open_preset_with(**overrides):
    from importlib.resources import files

    text = (files("ionctrl") / "presets" / "toy1.ini").read_text()
    for key, val in overrides.items():
        found = False
        lines = []
        for line in text.splitlines():
            if line.startswith(f"{key} ="):
                lines.append(f"{key} = {val}")
                found = True
            else:
                lines.append(line)
        assert found, key
        text = "\n".join(lines)
    return text
