"""Dense operator algebra on the composite space lambda ⊗ mode-a ⊗ mode-b.

Everything here is immutable: arrays are copied on construction and marked
read-only, so operators and states can be shared freely between solvers,
caches and worker processes.
"""
import math
import warnings
from dataclasses import dataclass
from functools import reduce

import numpy as np

from core.errors import InvalidArgumentError, InvalidDimensionError, UnphysicalStateError

# Lambda-system basis order, fixed project-wide.
LAMBDA_DIM = 3
LEVELS = ("G", "H", "E")
LEVEL_INDEX = {name: k for k, name in enumerate(LEVELS)}

# Overflow guard for tensor(): 3 * 36 * 36 covers every sensible switch cutoff.
MAX_TOTAL_DIM = 4096


def _frozen(array, dtype=complex):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SpaceLayout:
    """Ordered factor dimensions of a tensor-product Hilbert space."""

    dims: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims:
            raise InvalidDimensionError("layout needs at least one factor")
        if any(d < 1 for d in dims):
            raise InvalidDimensionError(f"every factor dimension must be >= 1, got {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def total(self):
        return math.prod(self.dims)

    @classmethod
    def single(cls, dim):
        return cls((dim,))

    @classmethod
    def switch(cls, n_a, n_b):
        """Layout (lambda, mode a, mode b) used by the switch model."""
        return cls((LAMBDA_DIM, n_a, n_b))

    def index(self, *labels):
        """Flat index of the product basis state ``|labels[0], labels[1], ...⟩``.

        Lambda levels may be given by name ("G", "H", "E") in slot 0.
        """
        if len(labels) != len(self.dims):
            raise InvalidArgumentError(f"expected {len(self.dims)} labels, got {len(labels)}")
        resolved = [LEVEL_INDEX[l] if isinstance(l, str) else int(l) for l in labels]
        for k, (label, dim) in enumerate(zip(resolved, self.dims)):
            if not 0 <= label < dim:
                raise InvalidArgumentError(f"label {label} out of range for factor {k} (dim {dim})")
        return int(np.ravel_multi_index(resolved, self.dims))


@dataclass(frozen=True, eq=False)
class Operator:
    layout: SpaceLayout
    entries: np.ndarray

    def __post_init__(self):
        entries = _frozen(self.entries)
        n = self.layout.total
        if entries.shape != (n, n):
            raise InvalidDimensionError(
                f"operator shape {entries.shape} does not match layout total {n}"
            )
        object.__setattr__(self, "entries", entries)

    def _check(self, other):
        if other.layout != self.layout:
            raise InvalidArgumentError(f"layout mismatch: {self.layout.dims} vs {other.layout.dims}")

    def dag(self):
        return Operator(self.layout, self.entries.conj().T)

    def __add__(self, other):
        self._check(other)
        return Operator(self.layout, self.entries + other.entries)

    def __sub__(self, other):
        self._check(other)
        return Operator(self.layout, self.entries - other.entries)

    def __neg__(self):
        return Operator(self.layout, -self.entries)

    def __mul__(self, scalar):
        return Operator(self.layout, self.entries * complex(scalar))

    __rmul__ = __mul__

    def __matmul__(self, other):
        if isinstance(other, Operator):
            self._check(other)
            return Operator(self.layout, self.entries @ other.entries)
        if isinstance(other, StateVector):
            self._check(other)
            return StateVector(self.layout, self.entries @ other.amplitudes)
        return NotImplemented

    def commutator(self, other):
        return self @ other - other @ self

    def expect(self, state):
        """⟨ψ|O|ψ⟩ for a StateVector or tr(Oρ) for a DensityMatrix."""
        self._check(state)
        if isinstance(state, StateVector):
            psi = state.amplitudes
            return complex(np.vdot(psi, self.entries @ psi))
        return complex(np.sum(self.entries * state.matrix.T))

    def hermiticity_defect(self):
        return float(np.max(np.abs(self.entries - self.entries.conj().T), initial=0.0))


@dataclass(frozen=True, eq=False)
class StateVector:
    layout: SpaceLayout
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = _frozen(self.amplitudes).reshape(-1)
        if amps.shape != (self.layout.total,):
            raise InvalidDimensionError(
                f"state length {amps.shape[0]} does not match layout total {self.layout.total}"
            )
        object.__setattr__(self, "amplitudes", amps)

    def norm(self):
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self):
        norm = self.norm()
        if norm == 0.0:
            raise InvalidArgumentError("cannot normalize the zero vector")
        return StateVector(self.layout, self.amplitudes / norm)

    def overlap(self, other):
        return complex(np.vdot(self.amplitudes, other.amplitudes))

    def to_density(self):
        psi = self.amplitudes
        return DensityMatrix(self.layout, np.outer(psi, psi.conj()))


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    layout: SpaceLayout
    matrix: np.ndarray

    def __post_init__(self):
        rho = _frozen(self.matrix)
        n = self.layout.total
        if rho.shape != (n, n):
            raise InvalidDimensionError(f"density matrix shape {rho.shape} does not match {n}")
        object.__setattr__(self, "matrix", rho)

    def trace(self):
        return complex(np.trace(self.matrix))

    def check(self, trace_tol=1e-9, herm_tol=1e-10, pos_tol=1e-8):
        """Hermiticity / unit-trace / positivity gate.

        Returns:
            DensityMatrix: self, so the gate can be chained.

        Raises:
            UnphysicalStateError: If any of the three conditions fails.
        """
        rho = self.matrix
        herm = float(np.max(np.abs(rho - rho.conj().T), initial=0.0))
        if herm > herm_tol:
            raise UnphysicalStateError(f"density matrix not Hermitian (defect {herm:.3e})")
        tr = self.trace()
        if abs(tr - 1.0) > trace_tol:
            raise UnphysicalStateError(f"density matrix trace {tr.real:.12f} deviates from 1")
        lowest = float(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0])
        if lowest < -pos_tol:
            raise UnphysicalStateError(f"density matrix has negative eigenvalue {lowest:.3e}")
        return self

    def expect(self, op):
        return op.expect(self)

    def fidelity(self, state):
        """⟨ψ|ρ|ψ⟩ against a pure state."""
        if state.layout != self.layout:
            raise InvalidArgumentError("layout mismatch in fidelity")
        return float(state.overlap(StateVector(self.layout, self.matrix @ state.amplitudes)).real)

    def trace_distance(self, other):
        diff = self.matrix - other.matrix
        return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(0.5 * (diff + diff.conj().T)))))

    def partial_trace(self, keep):
        """Reduced density matrix on the factors listed in ``keep`` (ascending)."""
        keep = sorted(int(k) for k in keep)
        dims = self.layout.dims
        if not keep or any(not 0 <= k < len(dims) for k in keep):
            raise InvalidArgumentError(f"invalid factors to keep: {keep}")
        n = len(dims)
        tensor_rho = self.matrix.reshape(dims + dims)
        row = list(range(n))
        col = [n + k if k in keep else k for k in range(n)]
        out = [k for k in keep] + [n + k for k in keep]
        reduced = np.einsum(tensor_rho, row + col, out)
        kept_dims = tuple(dims[k] for k in keep)
        d = math.prod(kept_dims)
        return DensityMatrix(SpaceLayout(kept_dims), reduced.reshape(d, d))


# --- single-factor constructors ---

def _check_cutoff(cutoff):
    if int(cutoff) < 1:
        raise InvalidDimensionError(f"Fock cutoff must be >= 1, got {cutoff}")
    return int(cutoff)


def annihilation(cutoff):
    """Truncated bosonic lowering operator, ``M[n-1, n] = sqrt(n)``."""
    cutoff = _check_cutoff(cutoff)
    entries = np.diag(np.sqrt(np.arange(1, cutoff, dtype=float)), k=1)
    return Operator(SpaceLayout.single(cutoff), entries)


def identity(dim):
    dim = _check_cutoff(dim)
    return Operator(SpaceLayout.single(dim), np.eye(dim))


def transition(dim, i, j):
    """Single-factor ``|i⟩⟨j|``."""
    dim = _check_cutoff(dim)
    entries = np.zeros((dim, dim), dtype=complex)
    entries[i, j] = 1.0
    return Operator(SpaceLayout.single(dim), entries)


def projector(dim, k):
    return transition(dim, k, k)


def basis(dim, k):
    dim = _check_cutoff(dim)
    if not 0 <= k < dim:
        raise InvalidArgumentError(f"basis index {k} outside dimension {dim}")
    amps = np.zeros(dim, dtype=complex)
    amps[k] = 1.0
    return StateVector(SpaceLayout.single(dim), amps)


def coherent_state(cutoff, amplitude):
    """Truncated coherent state ``c_n ∝ α^n / sqrt(n!)``, renormalised.

    Emits a RuntimeWarning when the discarded weight exceeds 1e-6.
    """
    cutoff = _check_cutoff(cutoff)
    alpha = complex(amplitude)
    amps = np.empty(cutoff, dtype=complex)
    amps[0] = 1.0
    for n in range(1, cutoff):
        amps[n] = amps[n - 1] * alpha / math.sqrt(n)
    kept = float(np.sum(np.abs(amps) ** 2)) * math.exp(-abs(alpha) ** 2)
    lost = 1.0 - kept
    if lost > 1e-6:
        warnings.warn(
            f"coherent state |{alpha:.4g}> truncated at {cutoff} levels loses weight {lost:.2e}",
            RuntimeWarning,
            stacklevel=2,
        )
    return StateVector(SpaceLayout.single(cutoff), amps / np.linalg.norm(amps))


# --- composite constructors ---

def tensor(ops):
    """Kronecker product of operators in list order."""
    ops = list(ops)
    if not ops:
        raise InvalidArgumentError("tensor() needs at least one operator")
    if len(ops) == 1:
        return ops[0]
    dims = tuple(d for op in ops for d in op.layout.dims)
    if math.prod(dims) > MAX_TOTAL_DIM:
        raise InvalidDimensionError(f"tensor product dimension {math.prod(dims)} exceeds {MAX_TOTAL_DIM}")
    entries = reduce(np.kron, (op.entries for op in ops))
    return Operator(SpaceLayout(dims), entries)


def embed(op, slot, layout):
    """Place a single-factor operator on factor ``slot`` of ``layout``."""
    if not 0 <= slot < len(layout.dims):
        raise InvalidArgumentError(f"slot {slot} outside layout {layout.dims}")
    if op.layout.total != layout.dims[slot]:
        raise InvalidArgumentError(
            f"operator dimension {op.layout.total} does not match factor {slot} "
            f"of layout {layout.dims}"
        )
    factors = [op if k == slot else identity(d) for k, d in enumerate(layout.dims)]
    return Operator(layout, tensor(factors).entries)


def product_state(states):
    states = list(states)
    if not states:
        raise InvalidArgumentError("product_state() needs at least one factor")
    dims = tuple(d for s in states for d in s.layout.dims)
    amps = reduce(np.kron, (s.amplitudes for s in states))
    return StateVector(SpaceLayout(dims), amps)


def basis_state(layout, *labels):
    amps = np.zeros(layout.total, dtype=complex)
    amps[layout.index(*labels)] = 1.0
    return StateVector(layout, amps)
