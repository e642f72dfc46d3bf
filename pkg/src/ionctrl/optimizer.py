"""Gradient-ascent pulse search with line search, smooth parametrizations, filtering.

Plain gradient ascent: iterates move along the analytic objective gradient
with a backtracking line search enforcing a sufficient increase, so the
recorded objective history is non-decreasing.  Amplitude waveforms can be
parametrized in the truncated cosine basis

    amp(t) = sum_k c_k [1 - cos(2 pi k t / T)],

which vanishes smoothly at both pulse edges, or kept per-slice with an
optional zero-phase lowpass filter applied to the waveform and to the
gradient after every step.  Amplitude bounds are enforced by projection.

An optional coarse warmup stage runs the same ascent on a reduced Fock
cutoff and/or coarser time step (and optionally a single phase sample) and
hands its cosine-basis coefficients to the full-resolution final stage;
the reported history and result always refer to the full-resolution
problem.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import (
    ChainOperators,
    DEFAULT_LEAKAGE_THRESHOLD,
    LeakageError,
    PulseProgram,
    evolve_state,
)
from .hilbert import IonChainSpec, OperatorMatrix
from .objective import TargetGate, _pops_from_rho
from .robustness import RobustnessSettings, objective_with_gradient

__all__ = [
    "OptimizerConfig",
    "OptimizationReport",
    "fourier_waveform",
    "fourier_basis",
    "project_gradient_to_coeffs",
    "lowpass",
    "grape_run",
]


def fourier_basis(k_max: int, total_time: float, times) -> np.ndarray:
    """Matrix B[k-1, i] = 1 - cos(2 pi k t_i / T) for k = 1 .. k_max."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    k = np.arange(1, int(k_max) + 1)
    return 1.0 - np.cos(2.0 * np.pi * np.outer(k, times) / total_time)


def fourier_waveform(coeffs, total_time: float, t):
    """Truncated cosine-basis waveform sum_k c_k [1 - cos(2 pi k t / T)].

    Exactly zero at t = 0 and t = T.  ``t`` may be a scalar or an array.
    """
    coeffs = np.atleast_1d(np.asarray(coeffs, dtype=float))
    scalar = np.isscalar(t)
    vals = coeffs @ fourier_basis(len(coeffs), total_time, t)
    return float(vals[0]) if scalar else vals


def project_gradient_to_coeffs(grad_over_slices, k_max: int, total_time: float, tau: float) -> np.ndarray:
    """Chain rule from per-slice amplitude gradients to cosine-basis coefficients.

    Slice m contributes at its midpoint t_m = (m + 1/2) tau:
    df/dc_k = sum_m df/damp[m] * [1 - cos(2 pi k t_m / T)].
    """
    grad = np.asarray(grad_over_slices, dtype=float)
    m = grad.shape[-1]
    times = (np.arange(m) + 0.5) * tau
    basis = fourier_basis(k_max, total_time, times)
    return grad @ basis.T


def lowpass(waveform, cutoff_hz: float, tau: float) -> np.ndarray:
    """Zero-phase frequency-domain truncation of a sampled waveform.

    Frequency components strictly above ``cutoff_hz`` are zeroed.  The
    cutoff must lie below the Nyquist frequency 1 / (2 tau).
    """
    w = np.asarray(waveform, dtype=float)
    nyquist = 0.5 / tau
    if not cutoff_hz < nyquist:
        raise ValueError(f"cutoff {cutoff_hz:.3e} Hz must be below the Nyquist frequency {nyquist:.3e} Hz")
    n = w.shape[-1]
    spectrum = np.fft.rfft(w, axis=-1)
    freqs = np.fft.rfftfreq(n, d=tau)
    spectrum[..., freqs > cutoff_hz] = 0.0
    return np.fft.irfft(spectrum, n=n, axis=-1)


# ---------------------------------------------------------------------------
# configuration and report


def _parse_smoothing(s: str):
    name, _, arg = s.partition(":")
    name = name.strip().lower()
    if name == "none":
        return ("none", None)
    if name == "fourier":
        k = int(arg) if arg else 12
        if k < 1:
            raise ValueError("fourier smoothing needs k_max >= 1")
        return ("fourier", k)
    if name == "lowpass":
        if not arg:
            raise ValueError("lowpass smoothing needs a cutoff in Hz, e.g. 'lowpass:5e6'")
        return ("lowpass", float(arg))
    raise ValueError(f"unknown smoothing {s!r}")


@dataclass
class OptimizerConfig:
    """Gradient-ascent settings.

    ``smoothing`` is one of ``"fourier:<k_max>"``, ``"lowpass:<cutoff_hz>"``
    or ``"none"``.  ``amp_bound`` (rad/s) is enforced by projection after
    every step.  ``init_amp`` (rad/s) scales the random initial cosine
    coefficients, drawn uniformly from [-init_amp, init_amp] / k; with
    ``init_amp = 0`` the start is taken from the provided pulse instead.
    The warmup fields configure an optional coarse first stage.
    """

    max_iters: int = 300
    grad_tol: float = 0.0
    fidelity_goal: float = 1.0
    step_init: float = 1.0
    step_shrink: float = 0.5
    step_c: float = 1e-4
    smoothing: str = "fourier:12"
    seed: int = 0
    amp_bound: float | None = None
    restarts: int = 1
    init_amp: float = 2 * np.pi * 2e6
    optimize_amp: bool = True
    optimize_spin_phase: bool = False
    optimize_motional_phase: bool = False
    warmup_cutoff: tuple | None = None
    warmup_tau_factor: int = 1
    warmup_iters: int = 0
    warmup_single_phase: bool = False
    max_backtracks: int = 40
    leakage_threshold: float = DEFAULT_LEAKAGE_THRESHOLD
    verbose: bool = True

    def __post_init__(self):
        if not 0.0 < self.step_shrink < 1.0:
            raise ValueError("step_shrink must lie in (0, 1)")
        if not 0.0 < self.fidelity_goal <= 1.0:
            raise ValueError("fidelity_goal must lie in (0, 1]")
        if self.max_iters < 0 or self.restarts < 1:
            raise ValueError("max_iters must be >= 0 and restarts >= 1")
        if self.max_backtracks < 1:
            raise ValueError("max_backtracks must be >= 1")
        _parse_smoothing(self.smoothing)
        if self.warmup_tau_factor < 1:
            raise ValueError("warmup_tau_factor must be >= 1")
        if not (self.optimize_amp or self.optimize_spin_phase or self.optimize_motional_phase):
            raise ValueError("at least one parameter family must be optimized")

    @property
    def smoothing_kind(self):
        return _parse_smoothing(self.smoothing)


@dataclass
class OptimizationReport:
    """Outcome of one pulse search."""

    iterate_history: list  # (objective, step, grad_norm) per accepted iterate
    final_pulse: PulseProgram
    final_fidelity: float
    termination: str
    final_objective: float = 0.0
    restart_index: int = 0


# ---------------------------------------------------------------------------
# parameter state: dict of arrays moved along the gradient


def _z_axpy(z, alpha, g):
    return {k: z[k] + alpha * g[k] for k in z}


def _z_dot(a, b):
    return float(sum(np.sum(a[k] * b[k]) for k in a))


def _z_inf(a):
    return max(float(np.max(np.abs(v))) if v.size else 0.0 for v in a.values())


class _Stage:
    """One ascent stage: a chain/cutoff, a time grid, and the sampled objective."""

    def __init__(self, spec, template, pops, samples, penalty_weight, target, opt, label):
        self.spec = spec
        self.template = template  # PulseProgram carrying frozen arrays and grid
        self.pops = pops
        self.samples = tuple(samples)
        self.penalty_weight = penalty_weight
        self.target = target
        self.opt = opt
        self.label = label
        self.ops = ChainOperators(spec)
        self.mode, self.arg = opt.smoothing_kind
        self.total_time = template.duration
        if self.mode == "fourier":
            self.basis = fourier_basis(self.arg, self.total_time, template.mid_times)
        self.settings = RobustnessSettings(
            phase_samples=self.samples,
            penalty_weight=penalty_weight,
            penalty_enabled=penalty_weight > 0.0,
        )

    def make_pulse(self, z) -> PulseProgram:
        t = self.template
        if self.opt.optimize_amp:
            amp = (z["amp_c"] @ self.basis) if self.mode == "fourier" else z["amp"]
        else:
            amp = t.amp
        spin = z.get("spin", t.spin_phase)
        mot = z.get("mot", t.motional_phase)
        return PulseProgram(t.drive_freqs, t.tau, amp, spin, mot, t.global_phase_offset)

    def project(self, z):
        """Feasibility projection: amplitude bound, and lowpass re-filtering."""
        bound = self.opt.amp_bound
        z = dict(z)
        if self.opt.optimize_amp:
            if self.mode == "fourier":
                if bound is not None:
                    coeffs = z["amp_c"].copy()
                    wave = coeffs @ self.basis
                    for l in range(wave.shape[0]):
                        peak = np.max(np.abs(wave[l]))
                        if peak > bound:
                            coeffs[l] *= bound / peak
                    z["amp_c"] = coeffs
            else:
                amp = z["amp"]
                if self.mode == "lowpass":
                    amp = lowpass(amp, self.arg, self.template.tau)
                if bound is not None:
                    amp = np.clip(amp, -bound, bound)
                z["amp"] = amp
        return z

    def grad_to_z(self, grad):
        g = {}
        if self.opt.optimize_amp:
            if self.mode == "fourier":
                g["amp_c"] = grad.d_amp @ self.basis.T
            elif self.mode == "lowpass":
                g["amp"] = lowpass(grad.d_amp, self.arg, self.template.tau)
            else:
                g["amp"] = grad.d_amp
        if self.opt.optimize_spin_phase:
            g["spin"] = grad.d_spin_phase
        if self.opt.optimize_motional_phase:
            g["mot"] = grad.d_motional_phase
        return g

    def evaluate(self, z, need_grad):
        pulse = self.make_pulse(z)
        j, fid, grad = objective_with_gradient(
            self.spec,
            pulse,
            self.target,
            self.pops,
            self.settings,
            need_grad=need_grad,
            compute_spin=self.opt.optimize_spin_phase,
            mode="first_order",  # ascent direction only; the line search owns monotonicity
            ops=self.ops,
        )
        return j, fid, (self.grad_to_z(grad) if need_grad else None)


def _restrict_pops(pops, full_dims, reduced_dims):
    """Truncate product-space populations to a smaller cutoff and renormalize."""
    p = pops.reshape(full_dims)
    sl = tuple(slice(0, d) for d in reduced_dims)
    p = p[sl].ravel()
    return p / p.sum()


def _downsample_template(template: PulseProgram, factor: int) -> PulseProgram:
    m = template.n_slices
    if m % factor:
        raise ValueError(f"slice count {m} not divisible by warmup_tau_factor {factor}")
    for name in ("amp", "spin_phase", "motional_phase"):
        arr = getattr(template, name)
        if np.any(arr != arr[:, :1]):
            raise ValueError("coarse warmup requires slice-constant frozen arrays")
    k = m // factor
    return PulseProgram(
        template.drive_freqs,
        template.tau * factor,
        template.amp[:, :k],
        template.spin_phase[:, :k],
        template.motional_phase[:, :k],
        template.global_phase_offset,
    )


def _initial_state(stage: _Stage, pulse0: PulseProgram, rng, init_amp):
    z = {}
    opt = stage.opt
    if opt.optimize_amp:
        if stage.mode == "fourier":
            k_max = stage.arg
            if init_amp > 0.0:
                scale = init_amp / np.arange(1, k_max + 1)
                z["amp_c"] = rng.uniform(-1.0, 1.0, (pulse0.n_tones, k_max)) * scale
            else:
                sol, *_ = np.linalg.lstsq(stage.basis.T, pulse0.amp.T, rcond=None)
                z["amp_c"] = sol.T
        else:
            if init_amp > 0.0:
                k_max = 12
                scale = init_amp / np.arange(1, k_max + 1)
                coeffs = rng.uniform(-1.0, 1.0, (pulse0.n_tones, k_max)) * scale
                z["amp"] = coeffs @ fourier_basis(k_max, stage.total_time, stage.template.mid_times)
            else:
                z["amp"] = stage.template.amp.copy()
    if opt.optimize_spin_phase:
        z["spin"] = stage.template.spin_phase.copy()
    if opt.optimize_motional_phase:
        z["mot"] = stage.template.motional_phase.copy()
    return stage.project(z)


def _ascend(stage: _Stage, z, max_iters, log):
    """Backtracking gradient ascent; returns (z, history, termination or None)."""
    opt = stage.opt
    j, fid, g = stage.evaluate(z, need_grad=True)
    history = [(j, 0.0, _z_inf(g))]
    log(0, j, fid, 0.0, _z_inf(g))
    step_scale = opt.step_init
    for it in range(1, max_iters + 1):
        if fid >= opt.fidelity_goal:
            return z, history, "goal_reached"
        gnorm2 = _z_dot(g, g)
        ginf = _z_inf(g)
        if ginf <= opt.grad_tol:
            return z, history, "grad_tol"
        alpha = step_scale / math.sqrt(gnorm2)
        accepted = False
        for bt in range(opt.max_backtracks):
            cand = stage.project(_z_axpy(z, alpha, g))
            jc, fc, _ = stage.evaluate(cand, need_grad=False)
            if jc >= j + opt.step_c * alpha * gnorm2:
                accepted = True
                break
            alpha *= opt.step_shrink
        if not accepted:
            return z, history, "line_search_failed"
        z = cand
        step_scale = alpha * math.sqrt(gnorm2) * (2.0 if bt == 0 else 1.0)
        j, fid, g = stage.evaluate(z, need_grad=True)
        history.append((j, alpha, _z_inf(g)))
        log(it, j, fid, alpha, _z_inf(g))
    return z, history, "max_iters"


def grape_run(
    spec: IonChainSpec,
    pulse0: PulseProgram,
    target: TargetGate,
    rho_th,
    opt: OptimizerConfig,
    robustness: RobustnessSettings | None = None,
) -> OptimizationReport:
    """Gradient-ascent search for a pulse implementing ``target``.

    ``pulse0`` fixes the drive frequencies, the time grid, and every frozen
    parameter array; its parameter values seed the search when
    ``opt.init_amp == 0``.  Runs ``opt.restarts`` independent starts
    (seeded ``opt.seed + r``), stopping early once the fidelity goal is
    reached, and returns the best run's report.  The final pulse of each
    restart is screened by the Fock-leakage check; a run that trips it
    terminates as ``leakage_abort``.
    """
    pops_full = _pops_from_rho(rho_th)
    samples = (
        robustness.phase_samples
        if robustness is not None
        else (pulse0.global_phase_offset % (2 * np.pi),)
    )
    lam = robustness.effective_weight if robustness is not None else 0.0

    if (opt.optimize_spin_phase or opt.optimize_motional_phase) and opt.warmup_tau_factor > 1:
        raise ValueError("coarse-time warmup supports amplitude-only optimization")

    final_stage = _Stage(spec, pulse0, pops_full, samples, lam, target, opt, "final")
    stages = []
    if opt.warmup_iters > 0:
        w_spec = spec if opt.warmup_cutoff is None else spec.with_cutoff(opt.warmup_cutoff)
        w_template = _downsample_template(pulse0, opt.warmup_tau_factor) if opt.warmup_tau_factor > 1 else pulse0
        w_pops = (
            _restrict_pops(pops_full, spec.motional_dims, w_spec.motional_dims)
            if opt.warmup_cutoff is not None
            else pops_full
        )
        w_samples = samples[:1] if opt.warmup_single_phase else samples
        if opt.smoothing_kind[0] != "fourier" and opt.warmup_tau_factor > 1:
            raise ValueError("coarse-time warmup requires the fourier parametrization")
        stages.append(_Stage(w_spec, w_template, w_pops, w_samples, lam, target, opt, "warmup"))
    stages.append(final_stage)

    best = None
    for r in range(opt.restarts):
        rng = np.random.default_rng(opt.seed + r)

        def log(stage_label):
            def fn(it, j, fid, alpha, ginf):
                if opt.verbose:
                    print(
                        f"restart={r} stage={stage_label} iter={it} objective={j:.12f} "
                        f"fidelity={fid:.12f} step={alpha:.6e} grad_norm={ginf:.6e}",
                        flush=True,
                    )
            return fn

        z = _initial_state(stages[0], stages[0].template, rng, opt.init_amp)
        history = []
        termination = "max_iters"
        for stage in stages:
            iters = opt.warmup_iters if stage.label == "warmup" else opt.max_iters
            z, history, termination = _ascend(stage, z, iters, log(stage.label))
        j, fid, _ = final_stage.evaluate(z, need_grad=False)
        pulse = final_stage.make_pulse(z)

        try:
            d = spec.internal_dim
            excited = np.zeros((d, d), dtype=complex)
            excited[0, 0] = 1.0
            rho0 = OperatorMatrix(np.kron(excited, np.diag(pops_full.astype(complex))), spec.dims)
            evolve_state(
                spec,
                pulse,
                rho0,
                sample_stride=max(1, pulse.n_slices),
                leakage_threshold=opt.leakage_threshold,
            )
        except LeakageError as err:
            if opt.verbose:
                print(f"restart={r} leakage_abort mode={err.mode} population={err.population:.3e}", flush=True)
            termination = "leakage_abort"

        report = OptimizationReport(
            iterate_history=history,
            final_pulse=pulse,
            final_fidelity=fid,
            termination=termination,
            final_objective=j,
            restart_index=r,
        )
        if best is None or _report_rank(report) > _report_rank(best):
            best = report
        if report.termination == "goal_reached" and report.final_fidelity >= opt.fidelity_goal:
            break
    return best


def _report_rank(report: OptimizationReport):
    return (report.termination != "leakage_abort", report.final_objective)
