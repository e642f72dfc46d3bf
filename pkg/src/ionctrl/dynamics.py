"""Slice-by-slice propagation of the driven qubit-phonon dynamics.

The control is piecewise constant: the evolution of duration T is divided
into M slices of length tau, each slice propagator is
``U_m = exp(-i tau (H_S + H_C[m]))`` with the oscillatory drive factors
sampled at the slice midpoint, and the total propagator is the ordered
product ``U_M ... U_1``.

Two internal propagation paths produce identical results.  The dense path
works on the full Hilbert space for arbitrary pulses.  When every tone of a
pulse shares one equatorial spin axis up to sign flips (the common
amplitude-modulated operating mode, e.g. all spin phases zero), the full
Hamiltonian block-diagonalizes in the product eigenbasis of that spin axis,
and the sector path propagates 2^N independent motional-space blocks, which
is roughly (2^N)^2 times cheaper.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np

from .hilbert import (
    IonChainSpec,
    OperatorMatrix,
    _embed_raw,
    _kron_chain,
    _position_sum_raw,
    ladder_ops,
)

__all__ = [
    "DEFAULT_LEAKAGE_THRESHOLD",
    "LeakageError",
    "PulseProgram",
    "TrajectoryRecord",
    "static_hamiltonian",
    "control_hamiltonian",
    "slice_propagator",
    "total_propagator",
    "evolve_state",
]

DEFAULT_LEAKAGE_THRESHOLD = 1e-4


class LeakageError(RuntimeError):
    """Raised when the population of the top Fock levels exceeds the allowed threshold."""

    def __init__(self, mode: int, time: float, population: float, threshold: float):
        self.mode = mode
        self.time = time
        self.population = population
        self.threshold = threshold
        super().__init__(
            f"Fock truncation leakage on mode {mode} at t = {time * 1e6:.4f} us: "
            f"top-level population {population:.3e} exceeds threshold {threshold:.1e}; "
            "raise the Fock cutoff"
        )


@dataclass
class PulseProgram:
    """Piecewise-constant multichromatic drive.

    ``amp``, ``spin_phase`` and ``motional_phase`` are L x M arrays indexed
    by (tone, slice).  Amplitudes are angular Rabi frequencies in rad/s and
    may be signed; a negative amplitude is equivalent to shifting the
    corresponding spin phase by pi.  ``global_phase_offset`` is the common
    offset added to every motional phase, modeling the unpredictable
    initial optical phase.
    """

    drive_freqs: np.ndarray
    tau: float
    amp: np.ndarray
    spin_phase: np.ndarray
    motional_phase: np.ndarray
    global_phase_offset: float = 0.0

    def __post_init__(self):
        self.drive_freqs = np.atleast_1d(np.asarray(self.drive_freqs, dtype=float))
        self.amp = np.atleast_2d(np.asarray(self.amp, dtype=float))
        self.spin_phase = np.atleast_2d(np.asarray(self.spin_phase, dtype=float))
        self.motional_phase = np.atleast_2d(np.asarray(self.motional_phase, dtype=float))
        problems = []
        if not (self.tau > 0 and np.isfinite(self.tau)):
            problems.append("tau must be positive and finite")
        L = self.drive_freqs.shape[0]
        if np.any(self.drive_freqs <= 0):
            problems.append("drive_freqs must be strictly positive")
        if len(np.unique(self.drive_freqs)) != L:
            problems.append("drive_freqs must be distinct")
        shape = self.amp.shape
        if shape[0] != L:
            problems.append(f"amp must have {L} rows (one per tone), got {shape[0]}")
        for name in ("amp", "spin_phase", "motional_phase"):
            arr = getattr(self, name)
            if arr.shape != shape:
                problems.append(f"{name} shape {arr.shape} differs from amp shape {shape}")
            elif not np.all(np.isfinite(arr)):
                problems.append(f"{name} contains non-finite entries")
        if not np.isfinite(self.global_phase_offset):
            problems.append("global_phase_offset must be finite")
        if problems:
            raise ValueError("invalid PulseProgram: " + "; ".join(problems))

    @classmethod
    def zeros(cls, drive_freqs, tau, n_slices, global_phase_offset=0.0):
        L = len(np.atleast_1d(drive_freqs))
        shape = (L, int(n_slices))
        return cls(
            drive_freqs,
            tau,
            np.zeros(shape),
            np.zeros(shape),
            np.zeros(shape),
            global_phase_offset,
        )

    @property
    def n_tones(self):
        return self.amp.shape[0]

    @property
    def n_slices(self):
        return self.amp.shape[1]

    @property
    def duration(self):
        return self.n_slices * self.tau

    @property
    def mid_times(self):
        """Slice midpoints (m + 1/2) tau where the drive factors are sampled."""
        return (np.arange(self.n_slices) + 0.5) * self.tau

    def replace(self, **kw) -> "PulseProgram":
        return replace(self, **kw)


@dataclass
class TrajectoryRecord:
    """Sampled phase-space trajectory and truncation diagnostics.

    ``x`` and ``p`` hold one row per mode, conditioned on the mode's
    reference internal state, with x = a + a_dag and p = i(a - a_dag).
    ``leakage`` is the peak population found in the top two Fock levels of
    each mode over the whole evolution.
    """

    times: np.ndarray
    x: np.ndarray
    p: np.ndarray
    leakage: np.ndarray
    top_level_population: np.ndarray  # per mode, per sampled time

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("time_s,mode,x,p,top_level_population\n")
            for j in range(self.x.shape[0]):
                for i, t in enumerate(self.times):
                    fh.write(
                        f"{float(t)!r},{j},{float(self.x[j, i])!r},{float(self.p[j, i])!r},"
                        f"{float(self.top_level_population[j, i])!r}\n"
                    )


# ---------------------------------------------------------------------------
# cached per-chain operator tables


class ChainOperators:
    """Motional-space operator tables reused across propagations of one chain."""

    def __init__(self, spec: IonChainSpec):
        self.spec = spec
        n = spec.n_ions
        mdims = spec.motional_dims
        dm = spec.motional_dim
        self.x_ops = []
        for j, dim in enumerate(mdims):
            low, _ = ladder_ops(dim - 1)
            self.x_ops.append(_embed_raw(low.data + low.data.conj().T, j, mdims))
        # per-mode occupation number of each product Fock state
        self.mode_levels = []
        for j, dim in enumerate(mdims):
            lev = _embed_raw(np.diag(np.arange(dim, dtype=float)), j, mdims).real.diagonal()
            self.mode_levels.append(np.rint(lev).astype(int))
        self.hs = np.zeros(dm)
        for j, dim in enumerate(mdims):
            self.hs += spec.mode_freqs[j] * self.mode_levels[j]
        self.xi1 = []
        self.xi2 = []
        for k in range(n):
            q = _position_sum_raw(spec, k)
            lam, vecs = np.linalg.eigh(q)
            self.xi1.append((vecs * np.cos(lam)) @ vecs.conj().T)
            self.xi2.append((vecs * (-np.sin(lam))) @ vecs.conj().T)
        # boolean masks selecting the top one / top two Fock levels per mode
        self.top1_mask = [self.mode_levels[j] == mdims[j] - 1 for j in range(n)]
        self.top2_mask = [self.mode_levels[j] >= mdims[j] - 2 for j in range(n)]
        self._sector_xy = {}

    def sector_signs(self):
        return list(product((1.0, -1.0), repeat=self.spec.n_ions))

    def sector_xy(self, signs):
        """X = sum_k s_k xi1_k and Y = sum_k s_k xi2_k for one spin sector."""
        key = tuple(signs)
        if key not in self._sector_xy:
            x = sum(s * xi for s, xi in zip(signs, self.xi1))
            y = sum(s * xi for s, xi in zip(signs, self.xi2))
            self._sector_xy[key] = (x, y)
        return self._sector_xy[key]


# ---------------------------------------------------------------------------
# pulse coefficient helpers


def _resolve_offset(pulse: PulseProgram, phase_offset):
    return pulse.global_phase_offset if phase_offset is None else float(phase_offset)


def _tone_angles(pulse: PulseProgram, phase_offset) -> np.ndarray:
    """theta_lm = omega_l t_m + motional_phase_lm + phase_offset at slice midpoints."""
    off = _resolve_offset(pulse, phase_offset)
    return pulse.drive_freqs[:, None] * pulse.mid_times[None, :] + pulse.motional_phase + off


def _common_spin_axis(pulse: PulseProgram):
    """Detect a tone-independent spin axis.

    Returns ``(phi_bar, eps)`` with eps the (L, M) array of +-1 sign flips
    when every spin phase equals phi_bar modulo pi (exactly, as stored),
    else None.  Exact float comparison is deliberate: qualifying pulses are
    built with constant phase arrays.
    """
    sp = pulse.spin_phase
    phi_bar = float(sp.flat[0])
    rel = sp - phi_bar
    plus = (rel == 0.0) | (np.abs(rel) == 2.0 * np.pi)
    minus = np.abs(rel) == np.pi
    if np.all(plus | minus):
        return phi_bar, np.where(plus, 1.0, -1.0)
    return None


def _axis_rotation(phi_bar: float, n_ions: int) -> np.ndarray:
    """Internal-space unitary whose columns are the sigma_phi product eigenstates."""
    plus = np.array([1.0, np.exp(1j * phi_bar)]) / math.sqrt(2.0)
    minus = np.array([1.0, -np.exp(1j * phi_bar)]) / math.sqrt(2.0)
    r = np.column_stack([plus, minus])
    return _kron_chain([r] * n_ions)


def _eigh_stack(hs: np.ndarray, max_chunk_bytes=2 ** 27):
    """Batched Hermitian eigendecomposition, chunked to bound workspace memory."""
    m, dim, _ = hs.shape
    chunk = max(1, int(max_chunk_bytes / (16 * dim * dim)))
    lams = np.empty((m, dim))
    vecs = np.empty((m, dim, dim), dtype=complex)
    for i in range(0, m, chunk):
        lam, v = np.linalg.eigh(hs[i : i + chunk])
        lams[i : i + chunk] = lam
        vecs[i : i + chunk] = v
    return lams, vecs


def _props_from_eigs(lams, vecs, tau):
    phases = np.exp(-1j * tau * lams)
    return np.matmul(vecs * phases[:, None, :], vecs.conj().transpose(0, 2, 1))


# ---------------------------------------------------------------------------
# propagation contexts


class _SectorContext:
    """Block-diagonal propagation in the common spin-axis eigenbasis."""

    kind = "sector"

    def __init__(self, ops: ChainOperators, pulse: PulseProgram, phase_offset, phi_bar, eps):
        self.ops = ops
        self.spec = ops.spec
        self.pulse = pulse
        self.phase_offset = _resolve_offset(pulse, phase_offset)
        self.phi_bar = phi_bar
        self.eps = eps
        self.tau = pulse.tau
        self.M = pulse.n_slices
        self.theta = _tone_angles(pulse, phase_offset)
        w_amp = eps * pulse.amp
        self.A = np.einsum("lm,lm->m", w_amp, np.cos(self.theta))
        self.B = np.einsum("lm,lm->m", w_amp, np.sin(self.theta))
        self.sectors = ops.sector_signs()
        self.rotation = _axis_rotation(phi_bar, self.spec.n_ions)
        self._unitaries = None
        self._eigs = None
        self._totals = None

    def slice_unitaries(self, keep_eigs=False):
        if self._unitaries is None or (keep_eigs and self._eigs is None):
            us, eigs = [], []
            hs = self.ops.hs
            for signs in self.sectors:
                x, y = self.ops.sector_xy(signs)
                h = self.A[:, None, None] * x + self.B[:, None, None] * y
                idx = np.arange(hs.size)
                h[:, idx, idx] += hs
                lam, v = _eigh_stack(h)
                us.append(_props_from_eigs(lam, v, self.tau))
                eigs.append((lam, v) if keep_eigs else None)
            self._unitaries = us
            self._eigs = eigs if keep_eigs else self._eigs
        return self._unitaries

    def slice_eigs(self):
        self.slice_unitaries(keep_eigs=True)
        return self._eigs

    def perturbation_coeffs(self):
        """H'[m] = A' X + B' Y per sector, the pi/2-advanced drive quadratures."""
        return -self.B, self.A

    def total_blocks(self):
        if self._totals is None:
            totals = []
            for u_stack in self.slice_unitaries():
                tot = np.eye(u_stack.shape[1], dtype=complex)
                for m in range(self.M):
                    tot = u_stack[m] @ tot
                totals.append(tot)
            self._totals = totals
        return self._totals

    def assemble_full(self, blocks):
        """Lift per-sector blocks back to the full space: (w x I) blkdiag (w^dag x I)."""
        d = self.spec.internal_dim
        dm = self.spec.motional_dim
        z = np.zeros((d, dm, d, dm), dtype=complex)
        for a, blk in enumerate(blocks):
            z[a, :, a, :] = blk
        w = self.rotation
        out = np.einsum("xa,anbm,by->xnym", w, z, w.conj().T, optimize=True)
        return out.reshape(d * dm, d * dm)

    def total_full(self):
        return self.assemble_full(self.total_blocks())

    def target_diag(self, target_matrix: np.ndarray) -> np.ndarray:
        """Diagonal of w^dag target^dag w: the only target data the sector path needs."""
        w = self.rotation
        return np.einsum("ax,xy,ya->a", w.conj().T, target_matrix.conj().T, w)


class _DenseContext:
    """Full-space propagation for arbitrary pulses."""

    kind = "dense"

    def __init__(self, ops: ChainOperators, pulse: PulseProgram, phase_offset):
        self.ops = ops
        self.spec = ops.spec
        self.pulse = pulse
        self.phase_offset = _resolve_offset(pulse, phase_offset)
        self.tau = pulse.tau
        self.M = pulse.n_slices
        self.theta = _tone_angles(pulse, phase_offset)
        spec = self.spec
        d = spec.internal_dim
        eye_int = [np.eye(2, dtype=complex)] * spec.n_ions
        from .hilbert import SIGMA_X, SIGMA_Y

        self.F = np.zeros((2, 2, spec.full_dim, spec.full_dim), dtype=complex)
        for p, sig in enumerate((SIGMA_X, SIGMA_Y)):
            for q in range(2):
                for k in range(spec.n_ions):
                    mats = list(eye_int)
                    mats[k] = sig
                    xi = (self.ops.xi1, self.ops.xi2)[q][k]
                    self.F[p, q] += np.kron(_kron_chain(mats), xi)
        self.hs_full = np.tile(self.ops.hs, d)
        self._unitaries = None
        self._totals = None

    def drive_coeffs(self):
        """c[p, q, m] such that H_C[m] = sum_pq c[p,q,m] F[p,q]."""
        u = np.stack([np.cos(self.pulse.spin_phase), np.sin(self.pulse.spin_phase)])
        v = np.stack([np.cos(self.theta), np.sin(self.theta)])
        return np.einsum("lm,plm,qlm->pqm", self.pulse.amp, u, v)

    def control_ham(self, m):
        c = self.drive_coeffs()[:, :, m]
        return sum(c[p, q] * self.F[p, q] for p in range(2) for q in range(2))

    def slice_ham(self, m):
        h = self.control_ham(m)
        idx = np.arange(h.shape[0])
        h[idx, idx] += self.hs_full
        return h

    def slice_unitaries(self):
        if self._unitaries is None:
            dim = self.spec.full_dim
            c = self.drive_coeffs()
            us = np.empty((self.M, dim, dim), dtype=complex)
            # chunked: build H, decompose, form U, discard eigenvectors
            chunk = max(1, int(2 ** 27 / (16 * dim * dim)))
            idx = np.arange(dim)
            for i in range(0, self.M, chunk):
                sl = slice(i, min(i + chunk, self.M))
                h = np.einsum("pqm,pqij->mij", c[:, :, sl], self.F, optimize=True)
                h[:, idx, idx] += self.hs_full
                lam, v = np.linalg.eigh(h)
                us[sl] = _props_from_eigs(lam, v, self.tau)
            self._unitaries = us
        return self._unitaries

    def total_full(self):
        if self._totals is None:
            us = self.slice_unitaries()
            tot = np.eye(self.spec.full_dim, dtype=complex)
            for m in range(self.M):
                tot = us[m] @ tot
            self._totals = tot
        return self._totals


def build_context(spec: IonChainSpec, pulse: PulseProgram, phase_offset=None, force_dense=False, ops=None):
    """Pick the cheapest propagation context that is exact for this pulse."""
    if pulse.n_tones != len(pulse.drive_freqs):
        raise ValueError("pulse arrays inconsistent with drive_freqs")
    ops = ops if ops is not None and ops.spec is spec else ChainOperators(spec)
    if not force_dense:
        axis = _common_spin_axis(pulse)
        if axis is not None:
            return _SectorContext(ops, pulse, phase_offset, axis[0], axis[1])
    return _DenseContext(ops, pulse, phase_offset)


# ---------------------------------------------------------------------------
# public operations


def static_hamiltonian(spec: IonChainSpec) -> OperatorMatrix:
    """Free motional Hamiltonian sum_j nu_j a_j^dag a_j on the full space."""
    ops = ChainOperators(spec)
    h = np.diag(np.tile(ops.hs, spec.internal_dim).astype(complex))
    return OperatorMatrix(h, spec.dims, hermitian=True)


def control_hamiltonian(spec: IonChainSpec, pulse: PulseProgram, m: int, phase_offset=None) -> OperatorMatrix:
    """Drive Hamiltonian of slice ``m``.

    ``sum_k sum_l amp_lm sigma^k(spin_phase_lm) xi^k(omega_l t_m +
    motional_phase_lm + phase_offset)`` with t_m the slice midpoint.
    """
    if not 0 <= m < pulse.n_slices:
        raise IndexError(f"slice index {m} out of range for M = {pulse.n_slices}")
    ctx = _DenseContext(ChainOperators(spec), pulse, phase_offset)
    from .hilbert import _hermitize

    return OperatorMatrix(_hermitize(ctx.control_ham(m)), spec.dims, hermitian=True)


def slice_propagator(hamiltonian: OperatorMatrix, tau: float) -> OperatorMatrix:
    """Unitary exp(-i tau H) through a Hermitian eigendecomposition of H."""
    h = hamiltonian.data
    dev = np.max(np.abs(h - h.conj().T))
    if dev > 1e-10:
        raise ValueError(f"slice_propagator requires a Hermitian matrix (deviation {dev:.3e})")
    lam, vecs = np.linalg.eigh(h)
    u = (vecs * np.exp(-1j * tau * lam)) @ vecs.conj().T
    return OperatorMatrix(u, hamiltonian.dims)


def total_propagator(spec: IonChainSpec, pulse: PulseProgram, phase_offset=None) -> OperatorMatrix:
    """Ordered product of all slice propagators, U(T) = U_M ... U_1."""
    ctx = build_context(spec, pulse, phase_offset)
    return OperatorMatrix(ctx.total_full(), spec.dims)


def _trajectory_sector_index(spec: IonChainSpec, mode: int) -> int:
    """Rotated-basis index of the reference internal state for one mode.

    The state is the product of sigma_x eigenstates whose signs follow the
    mode's Lamb-Dicke column, |+> for eta_kj >= 0 and |-> otherwise; for a
    symmetric two-ion chain this gives |++> for the in-phase mode and |+->
    for the out-of-phase mode.
    """
    idx = 0
    for k in range(spec.n_ions):
        bit = 0 if spec.lamb_dicke[k, mode] >= 0 else 1
        idx = idx * 2 + bit
    return idx


def evolve_state(
    spec: IonChainSpec,
    pulse: PulseProgram,
    rho0: OperatorMatrix,
    sample_stride: int = 1,
    leakage_threshold: float = DEFAULT_LEAKAGE_THRESHOLD,
    phase_offset=None,
):
    """Propagate a full-space density matrix and record phase-space trajectories.

    Returns ``(TrajectoryRecord, final_state)``.  The top-two-Fock-level
    population of every mode is monitored at every slice; exceeding
    ``leakage_threshold`` marks the run invalid by raising
    :class:`LeakageError` with the offending mode and time.
    """
    if rho0.dims != spec.dims:
        raise ValueError(f"rho0 dims {rho0.dims} do not match chain dims {spec.dims}")
    tr = np.trace(rho0.data)
    if abs(tr - 1.0) > 1e-9:
        raise ValueError(f"rho0 must have unit trace, got {tr}")
    sample_stride = max(1, int(sample_stride))

    ctx = build_context(spec, pulse, phase_offset)
    use_sectors = ctx.kind == "sector" and ctx.phi_bar == 0.0
    n = spec.n_ions
    dm = spec.motional_dim
    d = spec.internal_dim
    ops = ctx.ops
    M = pulse.n_slices

    sample_marks = sorted(set(range(0, M + 1, sample_stride)) | {M})
    times = np.array([m * pulse.tau for m in sample_marks])
    xs = np.zeros((n, len(sample_marks)))
    ps = np.zeros((n, len(sample_marks)))
    top1 = np.zeros((n, len(sample_marks)))
    peak_top2 = np.zeros(n)

    # p = i (a - a_dag), the package-wide quadrature sign convention
    p_ops = []
    for j, dim in enumerate(spec.motional_dims):
        low, _ = ladder_ops(dim - 1)
        p_ops.append(_embed_raw(1j * (low.data - low.data.conj().T), j, spec.motional_dims))

    def motional_diag_from_blocks(blocks):
        return sum(np.real(np.diagonal(b)) for b in blocks)

    if use_sectors:
        w_full = np.kron(ctx.rotation, np.eye(dm))
        rho_r = w_full.conj().T @ rho0.data @ w_full
        blocks = [
            [rho_r[a * dm : (a + 1) * dm, b * dm : (b + 1) * dm].copy() for b in range(d)]
            for a in range(d)
        ]
        us = ctx.slice_unitaries()
        traj_idx = [_trajectory_sector_index(spec, j) for j in range(n)]

        def record(pos):
            for j in range(n):
                a = traj_idx[j]
                xs[j, pos] = np.real(np.einsum("ij,ji->", ops.x_ops[j], blocks[a][a]))
                ps[j, pos] = np.real(np.einsum("ij,ji->", p_ops[j], blocks[a][a]))
                top1[j, pos] = motional_diag_from_blocks([blocks[a][a] for a in range(d)])[ops.top1_mask[j]].sum()

        def check_leakage(t):
            diag = motional_diag_from_blocks([blocks[a][a] for a in range(d)])
            for j in range(n):
                pop = diag[ops.top2_mask[j]].sum()
                peak_top2[j] = max(peak_top2[j], pop)
                if pop > leakage_threshold:
                    raise LeakageError(j, t, pop, leakage_threshold)

        pos = 0
        check_leakage(0.0)
        record(pos)
        pos += 1
        for m in range(M):
            for a in range(d):
                ua = us[a][m]
                for b in range(d):
                    blocks[a][b] = ua @ blocks[a][b] @ us[b][m].conj().T
            check_leakage((m + 1) * pulse.tau)
            if m + 1 in sample_marks:
                record(pos)
                pos += 1
        final = np.zeros((d * dm, d * dm), dtype=complex)
        for a in range(d):
            for b in range(d):
                final[a * dm : (a + 1) * dm, b * dm : (b + 1) * dm] = blocks[a][b]
        final = w_full @ final @ w_full.conj().T
    else:
        rho = rho0.data.copy()
        us = ctx.slice_unitaries() if ctx.kind == "dense" else None
        if us is None:
            # sector context with a rotated axis: assemble full-space slices
            sec_us = ctx.slice_unitaries()
            us = np.empty((M, spec.full_dim, spec.full_dim), dtype=complex)
            for m in range(M):
                us[m] = ctx.assemble_full([sec_us[a][m] for a in range(d)])
        proj = []
        for j in range(n):
            vecs = []
            for k in range(spec.n_ions):
                sign = 1.0 if spec.lamb_dicke[k, j] >= 0 else -1.0
                vecs.append(np.array([1.0, sign]) / math.sqrt(2.0))
            psi = _kron_chain([v.reshape(2, 1) for v in vecs]).ravel()
            proj.append(np.outer(psi, psi.conj()))
        obs_x = [np.kron(proj[j], ops.x_ops[j]) for j in range(n)]
        obs_p = [np.kron(proj[j], p_ops[j]) for j in range(n)]

        def motional_diag(rho_):
            return np.real(np.diagonal(rho_)).reshape(d, dm).sum(axis=0)

        def record(pos, rho_):
            for j in range(n):
                xs[j, pos] = np.real(np.einsum("ij,ji->", obs_x[j], rho_))
                ps[j, pos] = np.real(np.einsum("ij,ji->", obs_p[j], rho_))
                top1[j, pos] = motional_diag(rho_)[ops.top1_mask[j]].sum()

        def check_leakage(t, rho_):
            diag = motional_diag(rho_)
            for j in range(n):
                pop = diag[ops.top2_mask[j]].sum()
                peak_top2[j] = max(peak_top2[j], pop)
                if pop > leakage_threshold:
                    raise LeakageError(j, t, pop, leakage_threshold)

        pos = 0
        check_leakage(0.0, rho)
        record(pos, rho)
        pos += 1
        for m in range(M):
            rho = us[m] @ rho @ us[m].conj().T
            check_leakage((m + 1) * pulse.tau, rho)
            if m + 1 in sample_marks:
                record(pos, rho)
                pos += 1
        final = rho

    record_out = TrajectoryRecord(times, xs, ps, peak_top2, top1)
    return record_out, OperatorMatrix(final, spec.dims)
