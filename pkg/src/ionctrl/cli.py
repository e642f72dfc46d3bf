"""Command-line entry points: optimize, evaluate, sweep, trajectory.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime failure
(leakage abort, line-search failure, goal not reached), 3 I/O error.
Artifacts are written atomically (temp file + rename).  The environment
variable ``IONCTRL_THREADS`` caps the BLAS thread count when set.
"""
from __future__ import annotations

import argparse
import os
import sys
import tempfile

import numpy as np

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_IO = 3


def _apply_thread_env():
    n = os.environ.get("IONCTRL_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def _atomic_write(path, writer):
    """Write via a temp file in the target directory, then rename into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        os.close(fd)
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load(args):
    from .config import load_config

    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace

        cfg.optimizer = replace(cfg.optimizer, seed=args.seed)
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    return cfg


def _excited_thermal_state(cfg):
    from .hilbert import OperatorMatrix, thermal_populations

    spec = cfg.chain
    d = spec.internal_dim
    internal = np.zeros((d, d), dtype=complex)
    internal[0, 0] = 1.0
    pops = thermal_populations(cfg.thermal, spec)
    return OperatorMatrix(np.kron(internal, np.diag(pops.astype(complex))), spec.dims)


def cmd_optimize(args) -> int:
    from .config import dump_config, save_pulse
    from .hilbert import thermal_state
    from .optimizer import grape_run

    cfg = _load(args)
    rho_th = thermal_state(cfg.thermal, cfg.chain)
    report = grape_run(
        cfg.chain, cfg.pulse_template, cfg.target, rho_th, cfg.optimizer, cfg.robustness
    )
    outdir = cfg.output_dir
    os.makedirs(outdir, exist_ok=True)
    pulse_path = os.path.join(outdir, "pulse.csv")
    _atomic_write(pulse_path, lambda p: save_pulse(report.final_pulse, p))

    def write_report(path):
        with open(path, "w") as fh:
            fh.write(f"termination = {report.termination}\n")
            fh.write(f"final_fidelity = {report.final_fidelity!r}\n")
            fh.write(f"final_objective = {report.final_objective!r}\n")
            fh.write(f"restart_index = {report.restart_index}\n")
            fh.write(f"iterations = {len(report.iterate_history) - 1}\n")
            fh.write("iteration,objective,step,grad_norm\n")
            for i, (obj, step, gnorm) in enumerate(report.iterate_history):
                fh.write(f"{i},{obj!r},{step!r},{gnorm!r}\n")

    _atomic_write(os.path.join(outdir, "report.txt"), write_report)
    _atomic_write(
        os.path.join(outdir, "config_resolved.ini"),
        lambda p: open(p, "w").write(dump_config(cfg)),
    )
    print(
        f"optimize: termination={report.termination} fidelity={report.final_fidelity:.6f} "
        f"pulse={pulse_path}"
    )
    return EXIT_OK if report.termination in ("goal_reached", "grad_tol") else EXIT_RUNTIME


def cmd_evaluate(args) -> int:
    from .config import load_pulse
    from .dynamics import LeakageError, evolve_state
    from .hilbert import thermal_state
    from .robustness import phase_sampled_objective

    cfg = _load(args)
    pulse = load_pulse(args.pulse)
    if len(pulse.drive_freqs) != len(cfg.pulse_template.drive_freqs):
        raise ValueError(
            f"pulse has {len(pulse.drive_freqs)} tones, config expects "
            f"{len(cfg.pulse_template.drive_freqs)}"
        )
    rho_th = thermal_state(cfg.thermal, cfg.chain)
    nominal = phase_sampled_objective(
        cfg.chain, pulse, cfg.target, rho_th, [pulse.global_phase_offset % (2 * np.pi)]
    )
    print(f"nominal_fidelity = {nominal!r}")
    if cfg.robustness is not None and len(cfg.robustness.phase_samples) > 1:
        avg = phase_sampled_objective(
            cfg.chain, pulse, cfg.target, rho_th, cfg.robustness.phase_samples
        )
        print(f"phase_averaged_fidelity = {avg!r}")
    try:
        traj, _ = evolve_state(
            cfg.chain,
            pulse,
            _excited_thermal_state(cfg),
            sample_stride=max(1, pulse.n_slices // 20),
            leakage_threshold=cfg.leakage_threshold,
        )
        for j, peak in enumerate(traj.leakage):
            print(f"leakage_mode_{j} = {peak!r}")
    except LeakageError as err:
        print(f"leakage: {err}")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .config import load_pulse
    from .hilbert import thermal_state
    from .robustness import sweep_frequency, sweep_phase, sweep_thermal

    cfg = _load(args)
    pulse = load_pulse(args.pulse)
    rho_th = thermal_state(cfg.thermal, cfg.chain)
    sw = cfg.sweep
    if args.axis == "phase":
        grid = np.linspace(0.0, 2 * np.pi, sw.phase_points, endpoint=False)
        result = sweep_phase(cfg.chain, pulse, cfg.target, rho_th, grid)
    elif args.axis == "frequency":
        span = sw.frequency_span_khz * 1e3 * 2 * np.pi
        grid = np.linspace(-span, span, sw.frequency_points)
        result = sweep_frequency(cfg.chain, pulse, cfg.target, rho_th, grid)
        result.grid = grid / (2 * np.pi)  # report plain Hz in the CSV
    elif args.axis == "thermal":
        grid = np.linspace(0.0, sw.thermal_max_nbar, sw.thermal_points)
        result = sweep_thermal(cfg.chain, pulse, cfg.target, grid)
    else:
        raise ValueError(f"unknown sweep axis {args.axis!r} (phase|frequency|thermal)")
    outdir = cfg.output_dir
    path = os.path.join(outdir, f"sweep_{args.axis}.csv")
    _atomic_write(path, result.write_csv)
    print(
        f"sweep {args.axis}: points={len(result.grid)} "
        f"min_fidelity={result.fidelity.min()!r} max_fidelity={result.fidelity.max()!r} csv={path}"
    )
    return EXIT_OK


def cmd_trajectory(args) -> int:
    from .config import load_pulse
    from .dynamics import LeakageError, evolve_state

    cfg = _load(args)
    pulse = load_pulse(args.pulse)
    try:
        traj, _ = evolve_state(
            cfg.chain,
            pulse,
            _excited_thermal_state(cfg),
            sample_stride=args.stride,
            leakage_threshold=cfg.leakage_threshold,
        )
    except LeakageError as err:
        print(f"leakage: {err}")
        return EXIT_RUNTIME
    path = os.path.join(cfg.output_dir, "trajectory.csv")
    _atomic_write(path, traj.write_csv)
    closure_x = np.abs(traj.x[:, -1]).max()
    closure_p = np.abs(traj.p[:, -1]).max()
    print(f"trajectory: rows={traj.x.size} closure_x={closure_x!r} closure_p={closure_p!r} csv={path}")
    for j, peak in enumerate(traj.leakage):
        print(f"leakage_mode_{j} = {peak!r}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ionctrl",
        description="Entangling-gate pulse synthesis for trapped-ion chains beyond weak coupling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, pulse=False):
        p.add_argument("--config", required=True, help="config file path or preset name")
        p.add_argument("--out", help="output directory (overrides [outputs] directory)")
        p.add_argument("--seed", type=int, help="override the optimizer seed")
        if pulse:
            p.add_argument("--pulse", required=True, help="pulse CSV produced by 'optimize'")

    common(sub.add_parser("optimize", help="search for a pulse implementing the target gate"))
    common(sub.add_parser("evaluate", help="report fidelities and leakage of a pulse"), pulse=True)
    p_sweep = sub.add_parser("sweep", help="fidelity sweep along a robustness axis")
    common(p_sweep, pulse=True)
    p_sweep.add_argument("--axis", required=True, choices=("phase", "frequency", "thermal"))
    p_traj = sub.add_parser("trajectory", help="phase-space trajectory CSV for a pulse")
    common(p_traj, pulse=True)
    p_traj.add_argument("--stride", type=int, default=1, help="record every n-th slice")
    return parser


def main(argv=None) -> int:
    _apply_thread_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    from .config import ConfigError
    from .dynamics import LeakageError

    handlers = {
        "optimize": cmd_optimize,
        "evaluate": cmd_evaluate,
        "sweep": cmd_sweep,
        "trajectory": cmd_trajectory,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as err:
        print(str(err), file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as err:
        print(f"validation error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except LeakageError as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
