"""Operators on the composite Hilbert space of ion qubits and truncated motional modes.

The subsystem ordering is fixed throughout the package: qubit 1 .. qubit N
first, then motional mode 1 .. mode N, combined with numpy's row-major
Kronecker convention.  Quadratures follow ``x = a + a_dag`` and
``p = i(a - a_dag)``; the sign of ``p`` is deliberate and matches the
phase-space trajectory convention used by :mod:`ionctrl.dynamics`.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from itertools import product

import numpy as np

__all__ = [
    "HERMITIAN_ATOL",
    "SIGMA_X",
    "SIGMA_Y",
    "SIGMA_Z",
    "IonChainSpec",
    "OperatorMatrix",
    "ThermalSpec",
    "ladder_ops",
    "pauli_phi",
    "embed",
    "position_phase_ops",
    "xi_theta",
    "thermal_state",
    "thermal_populations",
    "partial_trace_motion",
    "pauli_basis",
]

HERMITIAN_ATOL = 1e-12

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)


def _kron_chain(mats):
    out = np.array([[1.0 + 0.0j]])
    for m in mats:
        out = np.kron(out, m)
    return out


def _hermitize(a: np.ndarray) -> np.ndarray:
    """Symmetrize away the roundoff of a numerically-built Hermitian matrix."""
    return (a + a.conj().T) / 2.0


@dataclass(frozen=True)
class IonChainSpec:
    """Static description of the ion chain.

    Parameters
    ----------
    n_ions : int
        Number of ions (= number of qubits = number of axial modes kept).
    mode_freqs : array_like
        Angular mode frequencies nu_j in rad/s, strictly positive and
        strictly increasing.
    lamb_dicke : array_like
        N x N matrix eta_kj coupling ion k to mode j (dimensionless).
    fock_cutoff : sequence of int
        Highest retained Fock level n_max per mode; mode j keeps
        n_max_j + 1 levels.
    """

    n_ions: int
    mode_freqs: np.ndarray
    lamb_dicke: np.ndarray
    fock_cutoff: tuple

    def __post_init__(self):
        object.__setattr__(self, "mode_freqs", np.atleast_1d(np.asarray(self.mode_freqs, dtype=float)))
        object.__setattr__(self, "lamb_dicke", np.atleast_2d(np.asarray(self.lamb_dicke, dtype=float)))
        object.__setattr__(self, "fock_cutoff", tuple(int(c) for c in np.atleast_1d(self.fock_cutoff)))
        n = self.n_ions
        problems = []
        if n < 1:
            problems.append("n_ions must be a positive integer")
        if self.mode_freqs.shape != (n,):
            problems.append(f"mode_freqs must have shape ({n},), got {self.mode_freqs.shape}")
        else:
            if not np.all(self.mode_freqs > 0):
                problems.append("mode_freqs must be strictly positive")
            if n > 1 and not np.all(np.diff(self.mode_freqs) > 0):
                problems.append("mode_freqs must be strictly increasing")
        if self.lamb_dicke.shape != (n, n):
            problems.append(f"lamb_dicke must have shape ({n}, {n}), got {self.lamb_dicke.shape}")
        else:
            if not np.all(np.isfinite(self.lamb_dicke)):
                problems.append("lamb_dicke entries must be finite")
            if np.any(np.all(self.lamb_dicke == 0.0, axis=1)):
                problems.append("each ion needs at least one nonzero Lamb-Dicke coupling")
        if len(self.fock_cutoff) != n:
            problems.append(f"fock_cutoff must have {n} entries, got {len(self.fock_cutoff)}")
        elif any(c < 1 for c in self.fock_cutoff):
            problems.append("fock_cutoff entries must be >= 1")
        if problems:
            raise ValueError("invalid IonChainSpec: " + "; ".join(problems))

    @property
    def n_modes(self):
        return self.n_ions

    @property
    def motional_dims(self):
        """Per-mode Hilbert dimensions (n_max + 1)."""
        return tuple(c + 1 for c in self.fock_cutoff)

    @property
    def dims(self):
        """Full subsystem dimension list: N twos, then the motional dims."""
        return (2,) * self.n_ions + self.motional_dims

    @property
    def internal_dim(self):
        return 2 ** self.n_ions

    @property
    def motional_dim(self):
        return math.prod(self.motional_dims)

    @property
    def full_dim(self):
        return self.internal_dim * self.motional_dim

    def with_cutoff(self, fock_cutoff) -> "IonChainSpec":
        """Copy of this spec with a different Fock truncation."""
        return IonChainSpec(self.n_ions, self.mode_freqs, self.lamb_dicke, fock_cutoff)


@dataclass
class OperatorMatrix:
    """Dense complex square matrix tagged with its subsystem factorization.

    ``dims`` records the ordered subsystem dimensions whose product equals
    the matrix side.  Instances created with ``hermitian=True`` are checked
    against A = A^dag to within 1e-12 entrywise.
    """

    data: np.ndarray
    dims: tuple
    hermitian: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=complex)
        self.dims = tuple(int(d) for d in self.dims)
        side = math.prod(self.dims)
        if self.data.ndim != 2 or self.data.shape[0] != self.data.shape[1]:
            raise ValueError(f"operator data must be a square matrix, got shape {self.data.shape}")
        if self.data.shape[0] != side:
            raise ValueError(f"matrix side {self.data.shape[0]} does not match prod(dims) = {side}")
        if self.hermitian:
            dev = np.max(np.abs(self.data - self.data.conj().T))
            if dev > HERMITIAN_ATOL:
                raise ValueError(f"matrix tagged Hermitian deviates from A = A^dag by {dev:.3e}")

    @property
    def dim(self):
        return self.data.shape[0]

    def dag(self) -> "OperatorMatrix":
        return OperatorMatrix(self.data.conj().T, self.dims)


@dataclass(frozen=True)
class ThermalSpec:
    """Mean phonon occupation n_bar per mode for the initial thermal product state."""

    nbar: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nbar", np.atleast_1d(np.asarray(self.nbar, dtype=float)))
        if np.any(self.nbar < 0) or not np.all(np.isfinite(self.nbar)):
            raise ValueError("nbar entries must be finite and >= 0")


def ladder_ops(n_max: int):
    """Lowering and raising operators truncated at Fock level ``n_max``.

    Returns the pair ``(lower, raise_)`` on the (n_max + 1)-dimensional
    space, with ``lower[n-1, n] = sqrt(n)`` and ``raise_ = lower^dag``.
    """
    n_max = int(n_max)
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    dim = n_max + 1
    low = np.zeros((dim, dim), dtype=complex)
    for n in range(1, dim):
        low[n - 1, n] = math.sqrt(n)
    return (
        OperatorMatrix(low, (dim,)),
        OperatorMatrix(low.conj().T, (dim,)),
    )


def pauli_phi(phi: float) -> OperatorMatrix:
    """Equatorial Pauli operator sigma_x cos(phi) + sigma_y sin(phi)."""
    if not np.isfinite(phi):
        raise ValueError("phi must be finite")
    return OperatorMatrix(np.cos(phi) * SIGMA_X + np.sin(phi) * SIGMA_Y, (2,), hermitian=True)


def _embed_raw(mat: np.ndarray, slot: int, dims) -> np.ndarray:
    mats = [np.eye(d, dtype=complex) for d in dims]
    mats[slot] = mat
    return _kron_chain(mats)


def embed(local: OperatorMatrix, slot: int, spec: IonChainSpec) -> OperatorMatrix:
    """Embed a single-subsystem operator at position ``slot`` of the chain's full space."""
    dims = spec.dims
    if not 0 <= slot < len(dims):
        raise ValueError(f"slot {slot} out of range for {len(dims)} subsystems")
    if local.dim != dims[slot]:
        raise ValueError(f"local operator dimension {local.dim} does not match dims[{slot}] = {dims[slot]}")
    return OperatorMatrix(_embed_raw(local.data, slot, dims), dims, hermitian=local.hermitian)


def _position_sum_raw(spec: IonChainSpec, ion: int) -> np.ndarray:
    """sum_j eta_kj (a_j + a_j^dag) on the motional factors."""
    mdims = spec.motional_dims
    total = np.zeros((spec.motional_dim, spec.motional_dim), dtype=complex)
    for j, dim in enumerate(mdims):
        eta = spec.lamb_dicke[ion, j]
        if eta == 0.0:
            continue
        low, _ = ladder_ops(dim - 1)
        total += eta * _embed_raw(low.data + low.data.conj().T, j, mdims)
    return total


def position_phase_ops(ion: int, spec: IonChainSpec):
    """cos and -sin of the position-dependent laser phase operator for one ion.

    Returns ``(xi1, xi2)`` acting on the motional factors only, where
    ``xi1 = cos(Q_k)`` and ``xi2 = -sin(Q_k)`` with
    ``Q_k = sum_j eta_kj (a_j + a_j^dag)``.  Both are computed exactly for
    the truncated operator through one Hermitian eigendecomposition of Q_k.
    """
    if not 0 <= ion < spec.n_ions:
        raise ValueError(f"ion index {ion} out of range for {spec.n_ions} ions")
    q = _position_sum_raw(spec, ion)
    lam, vecs = np.linalg.eigh(q)
    xi1 = _hermitize((vecs * np.cos(lam)) @ vecs.conj().T)
    xi2 = _hermitize((vecs * (-np.sin(lam))) @ vecs.conj().T)
    mdims = spec.motional_dims
    return (
        OperatorMatrix(xi1, mdims, hermitian=True),
        OperatorMatrix(xi2, mdims, hermitian=True),
    )


def xi_theta(xi1: OperatorMatrix, xi2: OperatorMatrix, theta: float) -> OperatorMatrix:
    """Rotated combination cos(theta) xi1 + sin(theta) xi2.

    With xi1 = cos(Q) and xi2 = -sin(Q) this equals cos(theta + Q).
    """
    if xi1.dims != xi2.dims:
        raise ValueError("xi1 and xi2 must share dims")
    return OperatorMatrix(
        np.cos(theta) * xi1.data + np.sin(theta) * xi2.data,
        xi1.dims,
        hermitian=True,
    )


def thermal_populations(th: ThermalSpec, spec: IonChainSpec) -> np.ndarray:
    """Diagonal populations of the truncated, renormalized thermal product state.

    Issues a warning when the truncation discards more than 1e-6 of the
    untruncated population mass of any mode before renormalization.
    """
    if th.nbar.shape != (spec.n_modes,):
        raise ValueError(f"nbar must have {spec.n_modes} entries, got {th.nbar.shape}")
    pops = np.array([1.0])
    for j, dim in enumerate(spec.motional_dims):
        nbar = th.nbar[j]
        ratio = nbar / (1.0 + nbar)
        p = ratio ** np.arange(dim)
        discarded = ratio ** dim  # tail mass of the geometric distribution
        if discarded > 1e-6:
            warnings.warn(
                f"mode {j}: truncation at n_max={dim - 1} discards population "
                f"{discarded:.3e} (nbar={nbar}); renormalizing",
                stacklevel=2,
            )
        pops = np.kron(pops, p / p.sum())
    return pops


def thermal_state(th: ThermalSpec, spec: IonChainSpec) -> OperatorMatrix:
    """Thermal product density matrix on the motional factors, unit trace after truncation."""
    pops = thermal_populations(th, spec)
    return OperatorMatrix(np.diag(pops.astype(complex)), spec.motional_dims, hermitian=True)


def partial_trace_motion(rho: OperatorMatrix) -> OperatorMatrix:
    """Trace out the motional factors, returning the internal-state reduction.

    ``rho.dims`` must follow the canonical layout of N qubit factors
    followed by N motional factors.
    """
    dims = rho.dims
    if len(dims) % 2 != 0 or len(dims) < 2:
        raise ValueError("dims must contain N qubit factors followed by N motional factors")
    n = len(dims) // 2
    if dims[:n] != (2,) * n:
        raise ValueError(f"leading {n} dims must be qubit factors of dimension 2, got {dims[:n]}")
    d_int = 2 ** n
    d_mot = math.prod(dims[n:])
    r = rho.data.reshape(d_int, d_mot, d_int, d_mot)
    return OperatorMatrix(np.einsum("anbn->ab", r), dims[:n])


def pauli_basis(n_qubits: int):
    """Tensor-product Pauli basis {I, X, Y, Z}^{otimes N} in fixed lexicographic order.

    The 4^N elements P_i are Hermitian, unitary, and orthogonal with
    Tr[P_i^dag P_j] = delta_ij 2^N.
    """
    singles = (np.eye(2, dtype=complex), SIGMA_X, SIGMA_Y, SIGMA_Z)
    return [_kron_chain(combo) for combo in product(singles, repeat=n_qubits)]
