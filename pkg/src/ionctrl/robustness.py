"""Robustness of optimized pulses: phase sampling, first-order sensitivity, sweeps.

Robustness to the unpredictable initial optical phase is pursued two ways,
which the optimizer can combine: averaging the fidelity over a set of
sampled phase offsets, and penalizing the first-order sensitivity of the
total propagator to a phase perturbation.  The sensitivity is the
first-order term of the perturbed evolution,

    D = -i U(T) int_0^T U^dag(t) H'(t) U(t) dt,

with H'(t) the phase derivative of the drive Hamiltonian.  Per slice the
integral is the top-right block of the exponential of the block
upper-triangular generator [[A, B], [0, A]] with A = -i tau (H_S + H_C[m])
and B = -i tau H'[m], and the slice contributions chain through the exact
prefix/suffix products.  Post-hoc sweeps over initial phase, common mode
frequency offsets, and thermal occupation quantify the result.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import ChainOperators, PulseProgram, build_context
from .hilbert import IonChainSpec, OperatorMatrix, ThermalSpec, _hermitize, thermal_populations
from .objective import (
    GradientArray,
    TargetGate,
    _fidelity_from_G,
    _frechet_weights,
    _overlap_matrix,
    _pops_from_rho,
    _trace_prod,
    fidelity_and_gradient,
)

__all__ = [
    "RobustnessSettings",
    "SweepResult",
    "phase_sampled_objective",
    "perturbation_operator",
    "directional_derivative",
    "robust_objective",
    "sweep_phase",
    "sweep_frequency",
    "sweep_thermal",
]


@dataclass
class RobustnessSettings:
    """Phase-robustness configuration for optimization runs.

    ``phase_samples`` are the offsets whose fidelities are averaged;
    ``penalty_weight`` scales the first-order sensitivity penalty
    ``|D|_F^2 / dim`` evaluated at each sampled phase and averaged.
    """

    phase_samples: tuple = (0.0,)
    penalty_weight: float = 0.0
    penalty_enabled: bool = False

    def __post_init__(self):
        self.phase_samples = tuple(float(s) for s in np.atleast_1d(self.phase_samples))
        if len(self.phase_samples) == 0:
            raise ValueError("phase_samples must be nonempty")
        if any(not (0.0 <= s < 2 * np.pi) for s in self.phase_samples):
            raise ValueError("phase_samples must lie in [0, 2*pi)")
        if self.penalty_weight < 0:
            raise ValueError("penalty_weight must be >= 0")

    @property
    def effective_weight(self):
        return self.penalty_weight if self.penalty_enabled else 0.0


@dataclass
class SweepResult:
    """Fidelity scan along one robustness axis."""

    axis: str
    grid: np.ndarray
    fidelity: np.ndarray
    infidelity: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.fidelity = np.asarray(self.fidelity, dtype=float)
        self.infidelity = np.asarray(self.infidelity, dtype=float)
        if not (len(self.grid) == len(self.fidelity) == len(self.infidelity)):
            raise ValueError("grid and fidelity arrays must have equal length")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("axis_value,fidelity,infidelity\n")
            for g, f, i in zip(self.grid, self.fidelity, self.infidelity):
                fh.write(f"{float(g)!r},{float(f)!r},{float(i)!r}\n")


# ---------------------------------------------------------------------------
# phase-sampled objective


def _fidelity_at_offset(spec, pulse, target, pops, offset, ops):
    ctx = build_context(spec, pulse, offset, ops=ops)
    if ctx.kind == "sector":
        c = ctx.target_diag(target.matrix)
        g = sum(c[a] * blk for a, blk in enumerate(ctx.total_blocks()))
    else:
        g = _overlap_matrix(ctx.total_full(), target.matrix, spec.motional_dim)
    return _fidelity_from_G(g, pops, spec.internal_dim)


def phase_sampled_objective(spec: IonChainSpec, pulse: PulseProgram, target: TargetGate, rho_th, samples) -> float:
    """Mean average gate fidelity over the sampled initial phase offsets."""
    samples = np.atleast_1d(np.asarray(samples, dtype=float))
    if samples.size == 0:
        raise ValueError("samples must be nonempty")
    pops = _pops_from_rho(rho_th)
    ops = ChainOperators(spec)
    vals = [_fidelity_at_offset(spec, pulse, target, pops, s, ops) for s in samples]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# first-order phase sensitivity


def perturbation_operator(spec: IonChainSpec, pulse: PulseProgram, m: int, phase_offset=None) -> OperatorMatrix:
    """Phase derivative of the slice-``m`` drive Hamiltonian.

    Every tone's drive quadrature is advanced by pi/2 and keeps its
    amplitude factor; this equals the sum over tones of the per-tone
    motional-phase derivatives.
    """
    from .dynamics import _DenseContext

    if not 0 <= m < pulse.n_slices:
        raise IndexError(f"slice index {m} out of range")
    ctx = _DenseContext(ChainOperators(spec), pulse, phase_offset)
    u = np.stack([np.cos(pulse.spin_phase[:, m]), np.sin(pulse.spin_phase[:, m])])
    v = np.stack([-np.sin(ctx.theta[:, m]), np.cos(ctx.theta[:, m])])
    out = np.zeros_like(ctx.F[0, 0])
    for p in range(2):
        for q in range(2):
            out += np.sum(pulse.amp[:, m] * u[p] * v[q]) * ctx.F[p, q]
    return OperatorMatrix(_hermitize(out), spec.dims, hermitian=True)


def _vanloan_offdiag_frechet(u, lam, vec, hp, tau):
    """Top-right block of expm([[-i tau H, -i tau H'], [0, -i tau H]]) from H's eigensystem."""
    w = _frechet_weights(lam, tau)
    c = vec.conj().T @ hp @ vec
    return vec @ ((-1j * tau) * c * w) @ vec.conj().T


def _directional_derivative_blocks(ctx, method="frechet"):
    """Per-sector (or full, for dense contexts) sensitivity blocks and slice data."""
    from scipy.linalg import expm

    tau, M = ctx.tau, ctx.M
    if ctx.kind == "sector":
        us = ctx.slice_unitaries(keep_eigs=(method == "frechet"))
        eigs = ctx.slice_eigs() if method == "frechet" else None
        ap, bp = ctx.perturbation_coeffs()
        d_blocks, v_blocks = [], []
        for a, signs in enumerate(ctx.sectors):
            x, y = ctx.ops.sector_xy(signs)
            nb = x.shape[0]
            vstack = np.empty((M, nb, nb), dtype=complex)
            dcur = np.zeros((nb, nb), dtype=complex)
            pref = np.eye(nb, dtype=complex)
            for m in range(M):
                hp = ap[m] * x + bp[m] * y
                if method == "frechet":
                    lam, vec = eigs[a][0][m], eigs[a][1][m]
                    vstack[m] = _vanloan_offdiag_frechet(us[a][m], lam, vec, hp, tau)
                else:
                    h = ctx.A[m] * x + ctx.B[m] * y
                    idx = np.arange(nb)
                    h[idx, idx] += ctx.ops.hs
                    gen = np.zeros((2 * nb, 2 * nb), dtype=complex)
                    gen[:nb, :nb] = -1j * tau * h
                    gen[nb:, nb:] = -1j * tau * h
                    gen[:nb, nb:] = -1j * tau * hp
                    vstack[m] = expm(gen)[:nb, nb:]
                dcur = us[a][m] @ dcur + vstack[m] @ pref
                pref = us[a][m] @ pref
            d_blocks.append(dcur)
            v_blocks.append(vstack)
        return d_blocks, v_blocks
    # dense
    us = ctx.slice_unitaries()
    dim = ctx.spec.full_dim
    vstack = np.empty((M, dim, dim), dtype=complex)
    dcur = np.zeros((dim, dim), dtype=complex)
    pref = np.eye(dim, dtype=complex)
    cu = np.stack([np.cos(ctx.pulse.spin_phase), np.sin(ctx.pulse.spin_phase)])
    sv = np.stack([-np.sin(ctx.theta), np.cos(ctx.theta)])
    cperp = np.einsum("lm,plm,qlm->pqm", ctx.pulse.amp, cu, sv)
    for m in range(M):
        hp = sum(cperp[p, q, m] * ctx.F[p, q] for p in range(2) for q in range(2))
        if method == "frechet":
            h = ctx.slice_ham(m)
            lam, vec = np.linalg.eigh(h)
            vstack[m] = _vanloan_offdiag_frechet(us[m], lam, vec, hp, tau)
        else:
            h = ctx.slice_ham(m)
            gen = np.zeros((2 * dim, 2 * dim), dtype=complex)
            gen[:dim, :dim] = -1j * tau * h
            gen[dim:, dim:] = -1j * tau * h
            gen[:dim, dim:] = -1j * tau * hp
            vstack[m] = expm(gen)[:dim, dim:]
        dcur = us[m] @ dcur + vstack[m] @ pref
        pref = us[m] @ pref
    return dcur, vstack


def directional_derivative(spec: IonChainSpec, pulse: PulseProgram, phase_offset=None, method: str = "blockexp") -> OperatorMatrix:
    """First-order response of the total propagator to a common phase perturbation.

    ``method="blockexp"`` exponentiates the augmented block generator per
    slice; ``method="frechet"`` evaluates the same integral from the slice
    Hamiltonian's eigensystem (identical result, cheaper, used inside
    optimization loops).
    """
    if method not in ("blockexp", "frechet"):
        raise ValueError("method must be 'blockexp' or 'frechet'")
    ctx = build_context(spec, pulse, phase_offset)
    blocks, _ = _directional_derivative_blocks(ctx, method)
    if ctx.kind == "sector":
        return OperatorMatrix(ctx.assemble_full(blocks), spec.dims)
    return OperatorMatrix(blocks, spec.dims)


def _penalty_sector(ctx, need_grad, ordering="midpoint"):
    """|D|_F^2 / dim and optionally its gradient, on the sector path.

    The gradient runs the same one-sweep adjoint recursion as the fidelity
    gradient, lifted to the doubled space of the augmented propagators
    W_m = [[U_m, V_m], [0, U_m]] whose ordered product carries D in its
    top-right block.
    """
    spec = ctx.spec
    dim = spec.full_dim
    tau, M = ctx.tau, ctx.M
    pulse = ctx.pulse
    d_blocks, v_blocks = _directional_derivative_blocks(ctx, method="frechet")
    pen = sum(float(np.sum(np.abs(db) ** 2)) for db in d_blocks) / dim
    if not need_grad:
        return pen, None

    us = ctx.slice_unitaries()
    totals = ctx.total_blocks()
    ap, bp = ctx.perturbation_coeffs()
    n_sec = len(ctx.sectors)
    # Psi blocks per sector: [[p11, p12], [p21, p22]]
    p11 = [np.zeros_like(d_blocks[a]) for a in range(n_sec)]
    p12 = [np.zeros_like(d_blocks[a]) for a in range(n_sec)]
    p21 = [d_blocks[a].conj().T @ totals[a] for a in range(n_sec)]
    p22 = [d_blocks[a].conj().T @ d_blocks[a] for a in range(n_sec)]

    xy = [ctx.ops.sector_xy(s) for s in ctx.sectors]

    def traces():
        txc = tyc = txp = typ = 0.0 + 0.0j
        for a in range(n_sec):
            diag_sum = p11[a] + p22[a]
            txc += _trace_prod(xy[a][0], diag_sum)
            tyc += _trace_prod(xy[a][1], diag_sum)
            txp += _trace_prod(xy[a][0], p21[a])
            typ += _trace_prod(xy[a][1], p21[a])
        return np.array([txc, tyc, txp, typ])

    tr = np.empty((4, M), dtype=complex)
    prev = traces()
    for m in range(M):
        for a in range(n_sec):
            u = us[a][m]
            v = v_blocks[a][m]
            ud = u.conj().T
            a11 = u @ p11[a] + v @ p21[a]
            a12 = u @ p12[a] + v @ p22[a]
            a21 = u @ p21[a]
            a22 = u @ p22[a]
            vud = v @ ud
            p11[a] = a11 @ ud
            p12[a] = a12 @ ud - p11[a] @ vud
            p21[a] = a21 @ ud
            p22[a] = a22 @ ud - p21[a] @ vud
        cur = traces()
        tr[:, m] = 0.5 * (cur + prev) if ordering == "midpoint" else cur
        prev = cur

    cos_t, sin_t = np.cos(ctx.theta), np.sin(ctx.theta)
    txc, tyc, txp, typ = tr
    # drive-Hamiltonian derivative against (p11 + p22), perturbation derivative against p21
    amp_tr = ctx.eps * (
        cos_t * txc[None, :] + sin_t * tyc[None, :] - sin_t * txp[None, :] + cos_t * typ[None, :]
    )
    mot_tr = pulse.amp * ctx.eps * (
        -sin_t * txc[None, :] + cos_t * tyc[None, :] - cos_t * txp[None, :] - sin_t * typ[None, :]
    )
    coef = 2.0 * tau / dim
    grad = GradientArray(
        d_amp=coef * np.real(-1j * amp_tr),
        d_spin_phase=np.zeros_like(pulse.amp),
        d_motional_phase=coef * np.real(-1j * mot_tr),
    )
    return pen, grad


def penalty_value(spec: IonChainSpec, pulse: PulseProgram, phase_offset=None) -> float:
    """|D|_F^2 / dim at one phase offset."""
    ctx = build_context(spec, pulse, phase_offset)
    if ctx.kind == "sector":
        pen, _ = _penalty_sector(ctx, need_grad=False)
        return pen
    d, _ = _directional_derivative_blocks(ctx, method="frechet")
    return float(np.sum(np.abs(d) ** 2)) / spec.full_dim


def robust_objective(spec: IonChainSpec, pulse: PulseProgram, target: TargetGate, rho_th, settings: RobustnessSettings) -> float:
    """Phase-sampled fidelity minus the weighted mean first-order sensitivity penalty."""
    j, _, _ = objective_with_gradient(spec, pulse, target, rho_th, settings, need_grad=False)
    return j


def objective_with_gradient(
    spec: IonChainSpec,
    pulse: PulseProgram,
    target: TargetGate,
    rho_th,
    settings: RobustnessSettings | None,
    *,
    need_grad: bool = True,
    compute_spin: bool = False,
    mode: str = "exact",
    ordering: str = "midpoint",
    ops: ChainOperators | None = None,
):
    """(J, mean fidelity, gradient of J) for the optimizer.

    J is the mean fidelity over the sampled phase offsets minus
    ``penalty_weight`` times the mean sensitivity penalty.  With no
    settings, the single sample is the pulse's own phase offset and the
    penalty is off.
    """
    if settings is None:
        samples = (None,)
        lam = 0.0
    else:
        samples = settings.phase_samples
        lam = settings.effective_weight
    pops = _pops_from_rho(rho_th)
    ops = ops if ops is not None and ops.spec is spec else ChainOperators(spec)
    from .objective import _dense_fidelity_gradient, _sector_fidelity_gradient

    fids, pens = [], []
    grads, pgrads = [], []
    for s in samples:
        ctx = build_context(spec, pulse, s, force_dense=compute_spin, ops=ops)
        if need_grad:
            if ctx.kind == "sector":
                f, g = _sector_fidelity_gradient(ctx, target, pops, mode, ordering)
            else:
                f, g = _dense_fidelity_gradient(ctx, target, pops, mode, ordering)
            grads.append(g)
        elif ctx.kind == "sector":
            c = ctx.target_diag(target.matrix)
            gm = sum(c[a] * blk for a, blk in enumerate(ctx.total_blocks()))
            f = _fidelity_from_G(gm, pops, spec.internal_dim)
        else:
            gm = _overlap_matrix(ctx.total_full(), target.matrix, spec.motional_dim)
            f = _fidelity_from_G(gm, pops, spec.internal_dim)
        fids.append(f)
        if lam > 0.0:
            if ctx.kind != "sector":
                if need_grad:
                    raise ValueError(
                        "fast-mode penalty gradients require a common spin axis; "
                        "freeze the spin phases or disable the penalty"
                    )
                pens.append(penalty_value(spec, pulse, s))
            else:
                pen, pg = _penalty_sector(ctx, need_grad, ordering)
                pens.append(pen)
                if need_grad:
                    pgrads.append(pg)

    f_mean = float(np.mean(fids))
    j = f_mean - (lam * float(np.mean(pens)) if pens else 0.0)
    if not need_grad:
        return j, f_mean, None

    n = len(samples)
    d_amp = sum(g.d_amp for g in grads) / n
    d_spin = sum(g.d_spin_phase for g in grads) / n
    d_mot = sum(g.d_motional_phase for g in grads) / n
    if pgrads:
        d_amp = d_amp - lam * sum(g.d_amp for g in pgrads) / n
        d_spin = d_spin - lam * sum(g.d_spin_phase for g in pgrads) / n
        d_mot = d_mot - lam * sum(g.d_motional_phase for g in pgrads) / n
    return j, f_mean, GradientArray(d_amp, d_spin, d_mot)


# ---------------------------------------------------------------------------
# sweeps


def sweep_phase(spec: IonChainSpec, pulse: PulseProgram, target: TargetGate, rho_th, grid) -> SweepResult:
    """Fidelity versus initial phase offset."""
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    pops = _pops_from_rho(rho_th)
    ops = ChainOperators(spec)
    fid = np.array([_fidelity_at_offset(spec, pulse, target, pops, s, ops) for s in grid])
    return SweepResult("initial_phase", grid, fid, 1.0 - fid)


def sweep_frequency(spec: IonChainSpec, pulse: PulseProgram, target: TargetGate, rho_th, offsets, per_mode: bool = False):
    """Fidelity versus mode-frequency offset.

    By default each offset shifts all mode frequencies together (common
    trap drift).  With ``per_mode=True`` a list of sweeps is returned, one
    per mode, varying that mode's frequency alone.
    """
    offsets = np.atleast_1d(np.asarray(offsets, dtype=float))
    pops = _pops_from_rho(rho_th)

    def run(shift_vector):
        fid = np.empty(len(offsets))
        for i, delta in enumerate(offsets):
            freqs = spec.mode_freqs + delta * shift_vector
            spec_i = IonChainSpec(spec.n_ions, freqs, spec.lamb_dicke, spec.fock_cutoff)
            fid[i] = _fidelity_at_offset(spec_i, pulse, target, pops, None, ChainOperators(spec_i))
        return fid

    if not per_mode:
        fid = run(np.ones(spec.n_modes))
        return SweepResult("mode_frequency_offset", offsets, fid, 1.0 - fid)
    out = []
    for j in range(spec.n_modes):
        e = np.zeros(spec.n_modes)
        e[j] = 1.0
        fid = run(e)
        out.append(SweepResult(f"mode_frequency_offset_mode{j}", offsets, fid, 1.0 - fid))
    return out


def sweep_thermal(spec: IonChainSpec, pulse: PulseProgram, target: TargetGate, grid_nbar) -> SweepResult:
    """Fidelity versus mean thermal occupation, applied to every mode.

    The propagator does not depend on the initial state, so it is computed
    once and only the thermal populations are rebuilt per grid point.
    """
    grid = np.atleast_1d(np.asarray(grid_nbar, dtype=float))
    ctx = build_context(spec, pulse)
    if ctx.kind == "sector":
        c = ctx.target_diag(target.matrix)
        g = sum(c[a] * blk for a, blk in enumerate(ctx.total_blocks()))
    else:
        g = _overlap_matrix(ctx.total_full(), target.matrix, spec.motional_dim)
    fid = np.empty(len(grid))
    for i, nbar in enumerate(grid):
        pops = thermal_populations(ThermalSpec(np.full(spec.n_modes, nbar)), spec)
        fid[i] = _fidelity_from_G(g, pops, spec.internal_dim)
    return SweepResult("thermal_occupation", grid, fid, 1.0 - fid)
