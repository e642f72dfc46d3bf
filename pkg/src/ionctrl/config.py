"""Run configuration files, scenario presets, and pulse-file serialization.

Config files are INI-style key-value sections with explicit units in the
key names (``trap`` frequencies and drive tones in MHz, gate time in us,
time step in ns); in memory everything is converted to angular rad/s and
seconds.  Presets reproducing the packaged two-ion scenarios ship as
config files under :mod:`ionctrl.presets` and are addressed by bare name.

Pulse files are versioned CSVs with a commented header; amplitudes are
stored as Rabi frequency / 2 pi in MHz.  Saving snaps each stored value to
the nearest float whose unit conversion reproduces the in-memory value
bitwise, so ``load(save(p))`` round-trips exactly.
"""
from __future__ import annotations

import configparser
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .dynamics import DEFAULT_LEAKAGE_THRESHOLD, PulseProgram
from .hilbert import IonChainSpec, ThermalSpec
from .objective import TargetGate
from .optimizer import OptimizerConfig
from .robustness import RobustnessSettings

__all__ = [
    "ConfigError",
    "SweepConfig",
    "RunConfig",
    "load_config",
    "dump_config",
    "preset_names",
    "save_pulse",
    "load_pulse",
]

MHZ = 2.0 * np.pi * 1e6

PRESETS = ("yb2_3us", "yb2_1us", "toy1")


class ConfigError(ValueError):
    """Configuration parse or validation failure; ``problems`` lists every issue."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.problems))


@dataclass
class SweepConfig:
    """Default grids for the sweep command."""

    phase_points: int = 32
    frequency_span_khz: float = 1.0
    frequency_points: int = 21
    thermal_max_nbar: float = 0.2
    thermal_points: int = 11

    def __post_init__(self):
        if min(self.phase_points, self.frequency_points, self.thermal_points) < 2:
            raise ValueError("sweep grids need at least 2 points")


@dataclass
class RunConfig:
    """Validated bundle of everything one run needs."""

    chain: IonChainSpec
    pulse_template: PulseProgram
    target: TargetGate
    thermal: ThermalSpec
    optimizer: OptimizerConfig
    robustness: RobustnessSettings | None
    sweep: SweepConfig
    output_dir: str
    leakage_threshold: float = DEFAULT_LEAKAGE_THRESHOLD


class _Reader:
    """configparser access with unit handling and error accumulation."""

    def __init__(self, parser: configparser.ConfigParser):
        self.parser = parser
        self.problems = []

    def _fetch(self, section, key, conv, default, required):
        if not self.parser.has_option(section, key):
            if required:
                self.problems.append(f"[{section}] missing required key '{key}'")
            return default
        raw = self.parser.get(section, key)
        try:
            return conv(raw)
        except (TypeError, ValueError) as err:
            self.problems.append(f"[{section}] {key} = {raw!r}: {err}")
            return default

    def flt(self, section, key, default=None, required=False):
        return self._fetch(section, key, float, default, required)

    def integer(self, section, key, default=None, required=False):
        return self._fetch(section, key, lambda s: int(s, 0), default, required)

    def boolean(self, section, key, default=False):
        truthy = {"1": True, "true": True, "yes": True, "on": True,
                  "0": False, "false": False, "no": False, "off": False}

        def conv(s):
            try:
                return truthy[s.strip().lower()]
            except KeyError:
                raise ValueError("expected a boolean")

        return self._fetch(section, key, conv, default, False)

    def text(self, section, key, default=None, required=False):
        return self._fetch(section, key, lambda s: s.strip(), default, required)

    def float_list(self, section, key, default=None, required=False):
        def conv(s):
            return np.array([float(tok) for tok in s.split(",") if tok.strip() != ""])

        return self._fetch(section, key, conv, default, required)

    def int_list(self, section, key, default=None, required=False):
        def conv(s):
            return tuple(int(tok) for tok in s.split(",") if tok.strip() != "")

        return self._fetch(section, key, conv, default, required)


def _preset_path(name: str):
    from importlib.resources import files

    return files("ionctrl") / "presets" / f"{name}.ini"


def preset_names():
    return PRESETS


def load_config(path_or_label) -> RunConfig:
    """Load and validate a run configuration from a file path or preset name."""
    path = str(path_or_label)
    if path in PRESETS:
        text = _preset_path(path).read_text()
        origin = f"preset {path}"
    else:
        if not os.path.exists(path):
            raise ConfigError([f"config file not found: {path}"])
        with open(path) as fh:
            text = fh.read()
        origin = path
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as err:
        raise ConfigError([f"parse error in {origin}: {err}"]) from err
    return _build_config(parser)


def _build_config(parser: configparser.ConfigParser) -> RunConfig:
    r = _Reader(parser)

    n_ions = r.integer("chain", "n_ions", required=True)
    freqs_mhz = r.float_list("chain", "mode_freqs_mhz", required=True)
    cutoff = r.int_list("chain", "fock_cutoff", required=True)
    leak = r.flt("chain", "leakage_threshold", DEFAULT_LEAKAGE_THRESHOLD)
    rows = []
    if n_ions is not None:
        for k in range(1, n_ions + 1):
            rows.append(r.float_list("chain", f"lamb_dicke_row_{k}", required=True))

    gate_time_us = r.flt("pulse", "gate_time_us", required=True)
    time_step_ns = r.flt("pulse", "time_step_ns", required=True)
    drive_mhz = r.float_list("pulse", "drive_freqs_mhz", required=True)
    offset = r.flt("pulse", "global_phase_offset_rad", 0.0)

    gate = r.text("target", "gate", required=True)
    nbar = r.float_list("thermal", "nbar", required=True)

    opt_kw = dict(
        max_iters=r.integer("optimizer", "max_iters", 300),
        grad_tol=r.flt("optimizer", "grad_tol", 0.0),
        fidelity_goal=r.flt("optimizer", "fidelity_goal", 1.0),
        step_init=r.flt("optimizer", "step_init", 1.0),
        step_shrink=r.flt("optimizer", "step_shrink", 0.5),
        step_c=r.flt("optimizer", "step_c", 1e-4),
        smoothing=r.text("optimizer", "smoothing", "fourier:12"),
        seed=r.integer("optimizer", "seed", 0),
        restarts=r.integer("optimizer", "restarts", 1),
        optimize_amp=r.boolean("optimizer", "optimize_amp", True),
        optimize_spin_phase=r.boolean("optimizer", "optimize_spin_phase", False),
        optimize_motional_phase=r.boolean("optimizer", "optimize_motional_phase", False),
        warmup_tau_factor=r.integer("optimizer", "warmup_tau_factor", 1),
        warmup_iters=r.integer("optimizer", "warmup_iters", 0),
        warmup_single_phase=r.boolean("optimizer", "warmup_single_phase", False),
        max_backtracks=r.integer("optimizer", "max_backtracks", 40),
        verbose=r.boolean("optimizer", "verbose", True),
    )
    amp_bound_mhz = r.flt("optimizer", "amp_bound_mhz", None)
    opt_kw["amp_bound"] = None if amp_bound_mhz is None else amp_bound_mhz * MHZ
    opt_kw["init_amp"] = r.flt("optimizer", "init_amp_mhz", 2.0) * MHZ
    warm_cut = r.int_list("optimizer", "warmup_cutoff", None)
    opt_kw["warmup_cutoff"] = warm_cut
    opt_kw["leakage_threshold"] = leak

    rob = None
    if parser.has_section("robustness"):
        samples = r.float_list("robustness", "phase_samples_rad", np.array([0.0]))
        rob_kw = dict(
            phase_samples=tuple(samples),
            penalty_weight=r.flt("robustness", "penalty_weight", 0.0),
            penalty_enabled=r.boolean("robustness", "penalty_enabled", False),
        )
    else:
        rob_kw = None

    sweep_kw = dict(
        phase_points=r.integer("sweep", "phase_points", 32),
        frequency_span_khz=r.flt("sweep", "frequency_span_khz", 1.0),
        frequency_points=r.integer("sweep", "frequency_points", 21),
        thermal_max_nbar=r.flt("sweep", "thermal_max_nbar", 0.2),
        thermal_points=r.integer("sweep", "thermal_points", 11),
    )
    outdir = r.text("outputs", "directory", "runs/out")

    if r.problems:
        raise ConfigError(r.problems)

    problems = []
    n_slices = None
    if gate_time_us is not None and time_step_ns is not None:
        ratio = gate_time_us * 1e-6 / (time_step_ns * 1e-9)
        n_slices = int(round(ratio))
        if n_slices < 1 or abs(ratio - n_slices) > 1e-9 * max(1.0, ratio):
            problems.append(
                f"[pulse] gate_time_us / time_step_ns = {ratio} must be a positive integer slice count"
            )

    def build(cls, *a, **kw):
        try:
            return cls(*a, **kw)
        except ValueError as err:
            problems.append(str(err))
            return None

    chain = build(IonChainSpec, n_ions, freqs_mhz * MHZ, np.array(rows), cutoff)
    thermal = build(ThermalSpec, nbar)
    target = None
    try:
        target = TargetGate.from_label(gate, n_ions)
    except ValueError as err:
        problems.append(f"[target] {err}")
    optimizer = build(OptimizerConfig, **opt_kw)
    robustness = build(RobustnessSettings, **rob_kw) if rob_kw is not None else None
    sweep = build(SweepConfig, **sweep_kw)
    template = None
    if n_slices is not None:
        template = build(
            PulseProgram.zeros, drive_mhz * MHZ, time_step_ns * 1e-9, n_slices, offset
        )
    if chain is not None and thermal is not None and len(thermal.nbar) != chain.n_modes:
        problems.append(f"[thermal] nbar needs {chain.n_modes} entries, got {len(thermal.nbar)}")
    if problems:
        raise ConfigError(problems)
    return RunConfig(
        chain=chain,
        pulse_template=template,
        target=target,
        thermal=thermal,
        optimizer=optimizer,
        robustness=robustness,
        sweep=sweep,
        output_dir=outdir,
        leakage_threshold=leak,
    )


def dump_config(cfg: RunConfig) -> str:
    """Serialize a RunConfig back to the INI schema (canonical units)."""
    out = io.StringIO()
    chain, opt = cfg.chain, cfg.optimizer

    def wline(s=""):
        out.write(s + "\n")

    def lst(arr):
        return ", ".join(repr(float(v)) for v in np.atleast_1d(arr))

    wline("[chain]")
    wline(f"n_ions = {chain.n_ions}")
    wline(f"mode_freqs_mhz = {lst(chain.mode_freqs / MHZ)}")
    for k in range(chain.n_ions):
        wline(f"lamb_dicke_row_{k + 1} = {lst(chain.lamb_dicke[k])}")
    wline(f"fock_cutoff = {', '.join(str(c) for c in chain.fock_cutoff)}")
    wline(f"leakage_threshold = {cfg.leakage_threshold!r}")
    wline()
    t = cfg.pulse_template
    wline("[pulse]")
    wline(f"gate_time_us = {t.duration * 1e6!r}")
    wline(f"time_step_ns = {t.tau * 1e9!r}")
    wline(f"drive_freqs_mhz = {lst(t.drive_freqs / MHZ)}")
    wline(f"global_phase_offset_rad = {t.global_phase_offset!r}")
    wline()
    wline("[target]")
    wline(f"gate = {cfg.target.label}")
    wline()
    wline("[thermal]")
    wline(f"nbar = {lst(cfg.thermal.nbar)}")
    wline()
    wline("[optimizer]")
    wline(f"max_iters = {opt.max_iters}")
    wline(f"grad_tol = {opt.grad_tol!r}")
    wline(f"fidelity_goal = {opt.fidelity_goal!r}")
    wline(f"step_init = {opt.step_init!r}")
    wline(f"step_shrink = {opt.step_shrink!r}")
    wline(f"step_c = {opt.step_c!r}")
    wline(f"smoothing = {opt.smoothing}")
    wline(f"seed = {opt.seed}")
    if opt.amp_bound is not None:
        wline(f"amp_bound_mhz = {opt.amp_bound / MHZ!r}")
    wline(f"init_amp_mhz = {opt.init_amp / MHZ!r}")
    wline(f"restarts = {opt.restarts}")
    wline(f"optimize_amp = {opt.optimize_amp}")
    wline(f"optimize_spin_phase = {opt.optimize_spin_phase}")
    wline(f"optimize_motional_phase = {opt.optimize_motional_phase}")
    if opt.warmup_cutoff is not None:
        wline(f"warmup_cutoff = {', '.join(str(c) for c in opt.warmup_cutoff)}")
    wline(f"warmup_tau_factor = {opt.warmup_tau_factor}")
    wline(f"warmup_iters = {opt.warmup_iters}")
    wline(f"warmup_single_phase = {opt.warmup_single_phase}")
    wline(f"max_backtracks = {opt.max_backtracks}")
    wline(f"verbose = {opt.verbose}")
    wline()
    if cfg.robustness is not None:
        rob = cfg.robustness
        wline("[robustness]")
        wline(f"phase_samples_rad = {lst(rob.phase_samples)}")
        wline(f"penalty_weight = {rob.penalty_weight!r}")
        wline(f"penalty_enabled = {rob.penalty_enabled}")
        wline()
    sw = cfg.sweep
    wline("[sweep]")
    wline(f"phase_points = {sw.phase_points}")
    wline(f"frequency_span_khz = {sw.frequency_span_khz!r}")
    wline(f"frequency_points = {sw.frequency_points}")
    wline(f"thermal_max_nbar = {sw.thermal_max_nbar!r}")
    wline(f"thermal_points = {sw.thermal_points}")
    wline()
    wline("[outputs]")
    wline(f"directory = {cfg.output_dir}")
    return out.getvalue()


# ---------------------------------------------------------------------------
# pulse files


def _snap_div(x: float, scale: float) -> float:
    """Largest-fidelity stored value y ~ x/scale with y * scale == x bitwise.

    Division followed by multiplication is not exactly invertible in
    floating point; nudging the quotient by a few ulps recovers an exact
    preimage whenever one exists.
    """
    x = float(x)
    y = x / scale
    if y * scale == x:
        return y
    for direction in (math.inf, -math.inf):
        cand = y
        for _ in range(3):
            cand = math.nextafter(cand, direction)
            if cand * scale == x:
                return cand
    return y


def save_pulse(pulse: PulseProgram, path):
    """Write a pulse program as a versioned CSV with a commented header."""
    lines = [
        "# ionctrl pulse file v1",
        f"# gate_time_us = {_snap_div(pulse.duration, 1e-6)!r}",
        f"# time_step_ns = {_snap_div(pulse.tau, 1e-9)!r}",
        f"# n_tones = {pulse.n_tones}",
        f"# n_slices = {pulse.n_slices}",
        "# drive_freqs_mhz = " + ", ".join(repr(_snap_div(w, MHZ)) for w in pulse.drive_freqs),
        f"# global_phase_offset_rad = {float(pulse.global_phase_offset)!r}",
        "# amp_mhz is Rabi frequency / 2pi; motional phase enters cos(omega t + phase + offset)",
        "slice,tone,amp_mhz,spin_phase_rad,motional_phase_rad",
    ]
    for m in range(pulse.n_slices):
        for l in range(pulse.n_tones):
            lines.append(
                f"{m},{l},{_snap_div(pulse.amp[l, m], MHZ)!r},"
                f"{float(pulse.spin_phase[l, m])!r},{float(pulse.motional_phase[l, m])!r}"
            )
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def load_pulse(path) -> PulseProgram:
    """Read a pulse file written by :func:`save_pulse`."""
    headers = {}
    rows = []
    with open(path) as fh:
        first = fh.readline().strip()
        if first != "# ionctrl pulse file v1":
            raise ValueError(f"{path}: not an ionctrl pulse file (bad version line {first!r})")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    key, _, val = body.partition("=")
                    headers[key.strip()] = val.strip()
                continue
            if line.startswith("slice,"):
                continue
            rows.append(line.split(","))
    try:
        n_tones = int(headers["n_tones"])
        n_slices = int(headers["n_slices"])
        tau = float(headers["time_step_ns"]) * 1e-9
        freqs = np.array([float(v) * MHZ for v in headers["drive_freqs_mhz"].split(",")])
        offset = float(headers.get("global_phase_offset_rad", "0.0"))
    except (KeyError, ValueError) as err:
        raise ValueError(f"{path}: malformed pulse file header ({err})") from err
    if len(rows) != n_tones * n_slices:
        raise ValueError(f"{path}: expected {n_tones * n_slices} rows, found {len(rows)}")
    amp = np.zeros((n_tones, n_slices))
    spin = np.zeros((n_tones, n_slices))
    mot = np.zeros((n_tones, n_slices))
    for row in rows:
        if len(row) != 5:
            raise ValueError(f"{path}: malformed row {row!r}")
        m, l = int(row[0]), int(row[1])
        amp[l, m] = float(row[2]) * MHZ
        spin[l, m] = float(row[3])
        mot[l, m] = float(row[4])
    return PulseProgram(freqs, tau, amp, spin, mot, offset)
