"""Pulse synthesis for fast trapped-ion entangling gates beyond weak coupling.

Exact dense simulation of the driven qubit-phonon dynamics on a truncated
Fock space, gradient-ascent pulse optimization of the thermal-averaged
gate fidelity, and robustness analysis against the initial optical phase,
mode-frequency drift, and thermal occupation.
"""

from .dynamics import (
    LeakageError,
    PulseProgram,
    TrajectoryRecord,
    control_hamiltonian,
    evolve_state,
    slice_propagator,
    static_hamiltonian,
    total_propagator,
)
from .hilbert import (
    IonChainSpec,
    OperatorMatrix,
    ThermalSpec,
    embed,
    ladder_ops,
    partial_trace_motion,
    pauli_phi,
    position_phase_ops,
    thermal_state,
    xi_theta,
)
from .objective import (
    GradientArray,
    TargetGate,
    average_gate_fidelity,
    control_derivatives,
    fidelity_and_gradient,
    fidelity_gradient,
)
from .optimizer import (
    OptimizationReport,
    OptimizerConfig,
    fourier_waveform,
    grape_run,
    lowpass,
    project_gradient_to_coeffs,
)
from .robustness import (
    RobustnessSettings,
    SweepResult,
    directional_derivative,
    perturbation_operator,
    phase_sampled_objective,
    robust_objective,
    sweep_frequency,
    sweep_phase,
    sweep_thermal,
)
from .config import RunConfig, load_config, load_pulse, save_pulse

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
