"""Master-equation machinery: Liouvillian, steady states and time evolution.

Vectorisation is column stacking, vec(AρB) = (Bᵀ ⊗ A) vec ρ. The stored
superoperator is dense for small spaces and sparse (CSC) above
DENSE_AUTO_DIM; it is only used for steady states and test oracles.
Time evolution works on the density matrix in matrix form so that a
time-dependent Hamiltonian costs nothing extra.
"""
import logging
import re
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.integrate import DOP853, RK45
from scipy.linalg import lstsq, lu_factor, lu_solve
from scipy.linalg.lapack import zgecon
from scipy.sparse.linalg import LinearOperator, lsqr, onenormest, splu
from scipy.sparse.linalg import norm as sparse_norm

from algorithms.switch_model import DriveState, collapse_operators, drive_state, hamiltonian_parts
from core.errors import (
    InvalidArgumentError,
    InvalidDimensionError,
    MultipleSteadyStatesError,
    SolverError,
    StiffnessError,
)
from core.operators import DensityMatrix

logger = logging.getLogger(__name__)

# Dense storage limit; sparse storage goes up to MAX_SPARSE_SUPEROP_DIM.
MAX_SUPEROP_DIM = 10_000
MAX_SPARSE_SUPEROP_DIM = 250_000
DENSE_AUTO_DIM = 2_500
STORAGES = ("auto", "dense", "sparse")
RTOL = 1e-8
ATOL = 1e-10
RANK_TOL = 1e-10
RESIDUAL_TOL = 1e-8
HERMITICITY_MONITOR_TOL = 1e-8
# Below this reciprocal condition number the LU answer is re-derived by least squares.
RCOND_FALLBACK = 1e-14

_STEPPERS = {"DOP853": DOP853, "RK45": RK45}


@dataclass(frozen=True, eq=False)
class Superoperator:
    """Generator acting on column-stacked density matrices."""

    layout: object
    matrix: object

    def __post_init__(self):
        n = self.layout.total
        if self.matrix.shape != (n * n, n * n):
            raise InvalidDimensionError(
                f"superoperator shape {self.matrix.shape} does not match layout total {n}"
            )
        if isinstance(self.matrix, np.ndarray):
            self.matrix.setflags(write=False)

    @property
    def is_sparse(self):
        return sparse.issparse(self.matrix)

    def trace_defect(self):
        """max |⟨⟨I|L|, zero for a trace-preserving generator."""
        n = self.layout.total
        trace_rows = np.arange(n) * (n + 1)
        column_sums = np.asarray(self.matrix[trace_rows, :].sum(axis=0)).ravel()
        return float(np.max(np.abs(column_sums), initial=0.0))

    def norm(self):
        if self.is_sparse:
            return float(sparse_norm(self.matrix))
        return float(np.linalg.norm(self.matrix))

    def apply(self, rho):
        """L acting on a DensityMatrix (or raw matrix), returned as an n x n array."""
        n = self.layout.total
        matrix = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho)
        out = self.matrix @ matrix.reshape(-1, order="F")
        return np.asarray(out).reshape((n, n), order="F")


def _entries(H, c_ops):
    for c in c_ops:
        if c.layout != H.layout:
            raise InvalidArgumentError(
                f"collapse operator layout {c.layout.dims} does not match Hamiltonian {H.layout.dims}"
            )
    return H.entries, [c.entries for c in c_ops]


def _decay_sum(c_list, n):
    total = np.zeros((n, n), dtype=complex)
    for c in c_list:
        total += c.conj().T @ c
    return total


def _storage_for(n, storage):
    if storage not in STORAGES:
        raise InvalidArgumentError(f"unknown superoperator storage {storage!r}; expected one of {STORAGES}")
    dim = n * n
    if storage == "auto":
        storage = "dense" if dim <= DENSE_AUTO_DIM else "sparse"
    limit = MAX_SUPEROP_DIM if storage == "dense" else MAX_SPARSE_SUPEROP_DIM
    if dim > limit:
        raise InvalidDimensionError(
            f"{storage} superoperator dimension {dim} exceeds {limit}; lower the Fock cutoffs"
        )
    return storage


def liouvillian(H, c_ops, storage="auto"):
    """Build L with L vec ρ = vec(-i[H,ρ] + Σ D[c]ρ).

    ``storage`` is ``"dense"``, ``"sparse"`` or ``"auto"`` (dense up to
    DENSE_AUTO_DIM, sparse above).

    Raises:
        InvalidArgumentError: If operator layouts differ or the storage is unknown.
        InvalidDimensionError: If the superoperator would exceed the limit of its storage.
    """
    h, c_list = _entries(H, c_ops)
    n = H.layout.total
    storage = _storage_for(n, storage)
    h_eff = h - 0.5j * _decay_sum(c_list, n)
    eye = sparse.identity(n, dtype=complex, format="csr")
    gen = -1j * sparse.kron(eye, sparse.csr_matrix(h_eff)) + 1j * sparse.kron(
        sparse.csr_matrix(h_eff.conj()), eye
    )
    for c in c_list:
        c_sp = sparse.csr_matrix(c)
        gen = gen + sparse.kron(c_sp.conj(), c_sp)
    if storage == "sparse":
        gen = gen.tocsc()
        gen.eliminate_zeros()
        return Superoperator(H.layout, gen)
    return Superoperator(H.layout, gen.toarray())


class _MatrixGenerator:
    """Right-hand side dρ/dt in matrix form with batched jump operators."""

    def __init__(self, parts, c_list):
        n = parts.layout.total
        self.n = n
        self.parts = parts
        self.decay = _decay_sum(c_list, n)
        if c_list:
            self.jumps = np.stack(c_list)
            self.jumps_dag = np.conj(np.swapaxes(self.jumps, 1, 2))
        else:
            self.jumps = None

    def apply(self, h, rho):
        h_eff = h - 0.5j * self.decay
        out = -1j * (h_eff @ rho - rho @ h_eff.conj().T)
        if self.jumps is not None:
            out = out + np.sum(self.jumps @ rho @ self.jumps_dag, axis=0)
        return out

    def __call__(self, t, y):
        rho = y.reshape(self.n, self.n)
        return self.apply(self.parts.at(t), rho).reshape(-1)


@dataclass(frozen=True, eq=False)
class _StaticParts:
    layout: object
    static: np.ndarray

    def at(self, t):
        return self.static


def lindblad_rhs(H, c_ops, rho):
    """-i[H,ρ] + Σ D[c]ρ evaluated directly, without building L."""
    h, c_list = _entries(H, c_ops)
    matrix = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)
    return _MatrixGenerator(_StaticParts(H.layout, h), c_list).apply(h, matrix)


def _sub_indices(support, n):
    idx = np.arange(n) if support is None else np.unique(np.asarray(support, dtype=int))
    if idx.size == 0 or idx[0] < 0 or idx[-1] >= n:
        raise InvalidArgumentError(f"steady-state support must index into 0..{n - 1}")
    # vec position of (idx[r], idx[c]) is idx[c] * n + idx[r]; Fortran ravel keeps column stacking.
    return idx, (idx[None, :] * n + idx[:, None]).ravel(order="F")


def _block(matrix, rows, cols):
    if sparse.issparse(matrix):
        return matrix.tocsr()[rows, :].tocsc()[:, cols]
    return matrix[np.ix_(rows, cols)]


def _max_abs(matrix):
    if sparse.issparse(matrix):
        return float(abs(matrix).max()) if matrix.nnz else 0.0
    return float(np.max(np.abs(matrix), initial=0.0))


def _reduced_system(matrix, sub):
    m = int(round(np.sqrt(sub.size)))
    full = sub.size == matrix.shape[0]
    diagonal = np.arange(m) * (m + 1)
    rhs = np.zeros(m * m, dtype=complex)
    rhs[0] = 1.0
    if sparse.issparse(matrix):
        a = matrix.tocsr() if full else _block(matrix, sub, sub).tocsr()
        trace_row = sparse.csr_matrix(
            (np.ones(m, dtype=complex), (np.zeros(m, dtype=int), diagonal)), shape=(1, m * m)
        )
        return sparse.vstack([trace_row, a[1:, :]], format="csc"), rhs
    a = np.array(matrix) if full else matrix[np.ix_(sub, sub)]
    a[0, :] = 0.0
    a[0, diagonal] = 1.0
    return a, rhs


def _rank_check(pivots):
    deficient = int(np.count_nonzero(pivots < RANK_TOL * pivots.max()))
    if deficient:
        raise MultipleSteadyStatesError(
            f"steady-state system is rank deficient ({deficient} tiny pivots)",
            null_dimension=deficient + 1,
        )


def _dense_lu_solve(a, rhs):
    anorm = float(np.max(np.sum(np.abs(a), axis=0)))
    lu, piv = lu_factor(a, overwrite_a=True, check_finite=False)
    _rank_check(np.abs(np.diag(lu)))
    rcond, _ = zgecon(lu, anorm, norm="1")
    return lu_solve((lu, piv), rhs, check_finite=False), float(rcond)


def _sparse_lu_solve(a, rhs):
    anorm = float(abs(a).sum(axis=0).max())
    try:
        lu = splu(a, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise MultipleSteadyStatesError(
            f"steady-state system is singular: {exc}", null_dimension=2
        ) from exc
    _rank_check(np.abs(lu.U.diagonal()))
    inverse = LinearOperator(
        a.shape, matvec=lu.solve, rmatvec=lambda v: lu.solve(v, trans="H"), dtype=complex
    )
    rcond = 1.0 / (anorm * onenormest(inverse))
    return lu.solve(rhs), float(rcond)


def _least_squares(a, rhs):
    if sparse.issparse(a):
        return lsqr(a, rhs, atol=1e-15, btol=1e-15, iter_lim=20 * a.shape[0])[0]
    return lstsq(a, rhs, check_finite=False)[0]


def steady_state(L, support=None):
    """Unique stationary state of L via trace-row replacement and LU.

    Dense generators are factorised with LAPACK, sparse ones with SuperLU;
    both go through the same pivot rank check and residual bound.

    Args:
        L (Superoperator): Trace-preserving generator.
        support (array-like | None): Basis indices spanning an invariant
            subspace; the solve is restricted to operators living on it.

    Returns:
        DensityMatrix: The steady state, already through the density gate.

    Raises:
        MultipleSteadyStatesError: If the LU pivots reveal extra null directions.
        InvalidArgumentError: If ``support`` is not invariant under L.
        SolverError: If neither LU nor least squares meets the residual bound.
    """
    n = L.layout.total
    idx, sub = _sub_indices(support, n)
    full_norm = L.norm()
    if support is not None:
        outside = np.setdiff1d(np.arange(n * n), sub, assume_unique=True)
        leak = _max_abs(_block(L.matrix, outside, sub))
        if leak > 1e-12 * max(full_norm, 1.0):
            raise InvalidArgumentError(f"support is not invariant under the generator (leak {leak:.3e})")

    a, rhs = _reduced_system(L.matrix, sub)
    solve = _sparse_lu_solve if L.is_sparse else _dense_lu_solve
    x, rcond = solve(a, rhs)
    del a
    logger.debug("steady-state solve: size %d, sparse %s, reciprocal condition %.3e",
                 sub.size, L.is_sparse, rcond)

    columns = L.matrix if support is None else _block(L.matrix, np.arange(n * n), sub)
    residual = float(np.linalg.norm(columns @ x))
    bound = RESIDUAL_TOL * full_norm
    if rcond < RCOND_FALLBACK or residual > bound:
        logger.warning(
            "steady-state LU residual %.3e (rcond %.3e); falling back to least squares", residual, rcond
        )
        a, rhs = _reduced_system(L.matrix, sub)
        x = _least_squares(a, rhs)
        residual = float(np.linalg.norm(columns @ x))
        if residual > bound:
            raise SolverError(
                f"steady-state residual {residual:.3e} above bound {bound:.3e}", rcond=rcond
            )

    m = idx.size
    rho = np.zeros((n, n), dtype=complex)
    rho[np.ix_(idx, idx)] = x.reshape((m, m), order="F")
    rho = 0.5 * (rho + rho.conj().T)
    rho /= np.trace(rho).real
    return DensityMatrix(L.layout, rho).check()


# --- drive schedules ---

_NUMBER = r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?"
_SEGMENT_RE = re.compile(rf"^\s*([a-z+]+)\s*:\s*({_NUMBER})\s*-\s*({_NUMBER})\s*$")


@dataclass(frozen=True)
class ScheduleSegment:
    start: float
    end: float
    drives: DriveState

    def __post_init__(self):
        if not self.end > self.start:
            raise InvalidArgumentError(f"schedule segment must have end > start, got [{self.start}, {self.end}]")


@dataclass(frozen=True)
class DriveSchedule:
    """Contiguous piecewise-constant drive settings."""

    segments: tuple

    def __post_init__(self):
        segments = tuple(self.segments)
        if not segments:
            raise InvalidArgumentError("drive schedule is empty")
        for prev, seg in zip(segments, segments[1:]):
            if abs(seg.start - prev.end) > 1e-12 * max(1.0, abs(prev.end)):
                raise InvalidArgumentError(
                    f"schedule segments are not contiguous: {prev.end} then {seg.start}"
                )
        object.__setattr__(self, "segments", segments)

    @property
    def start(self):
        return self.segments[0].start

    @property
    def end(self):
        return self.segments[-1].end

    @classmethod
    def constant(cls, drives, start, end):
        return cls((ScheduleSegment(float(start), float(end), drives),))

    @classmethod
    def parse(cls, text):
        """Parse ``"a:0-2000, c:2000-4000, off:4000-6000"``."""
        segments = []
        for chunk in str(text).split(","):
            if not chunk.strip():
                continue
            match = _SEGMENT_RE.match(chunk.lower())
            if match is None:
                raise InvalidArgumentError(f"cannot parse schedule segment {chunk.strip()!r}")
            label, start, end = match.groups()
            segments.append(ScheduleSegment(float(start), float(end), drive_state(label)))
        return cls(tuple(segments))

    @classmethod
    def coerce(cls, value, start, end):
        """Accept a schedule, its text form, or a single DriveState held over [start, end]."""
        if isinstance(value, DriveSchedule):
            return value
        if isinstance(value, DriveState):
            return cls.constant(value, start, end)
        if isinstance(value, str):
            return cls.parse(value)
        return cls(tuple(value))

    def check_covers(self, t_grid):
        tol = 1e-12 * max(1.0, abs(self.end))
        if t_grid[0] < self.start - tol or t_grid[-1] > self.end + tol:
            raise InvalidArgumentError(
                f"schedule [{self.start}, {self.end}] does not cover grid [{t_grid[0]}, {t_grid[-1]}]"
            )

    def to_text(self):
        return ", ".join(f"{s.drives.label()}:{s.start:g}-{s.end:g}" for s in self.segments)


# --- adaptive stepping ---

def _check_grid(t_grid):
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size == 0:
        raise InvalidArgumentError("time grid must be a non-empty 1-D sequence")
    if np.any(np.diff(t_grid) <= 0.0):
        raise InvalidArgumentError("time grid must be strictly increasing")
    return t_grid


def adaptive_steps(fun, y0, t0, t1, rtol=RTOL, atol=ATOL, method="DOP853", project=None):
    """Drive a scipy OdeSolver step by step from t0 to exactly t1.

    Yields ``(t_old, t_new, interpolant, y_new)`` after every accepted step.
    ``project`` may map the accepted state onto a constraint manifold; the
    stepper then continues from the projected state.

    Raises:
        StiffnessError: If the step size underflows.
    """
    if method not in _STEPPERS:
        raise InvalidArgumentError(f"unknown integrator {method!r}; choose from {sorted(_STEPPERS)}")
    if t1 <= t0:
        return
    solver = _STEPPERS[method](fun, t0, np.asarray(y0, dtype=complex), t1, rtol=rtol, atol=atol)
    while solver.status == "running":
        t_old = solver.t
        message = solver.step()
        if solver.status == "failed":
            raise StiffnessError(f"integrator failed: {message}", time=float(t_old))
        interpolant = solver.dense_output()
        if project is not None:
            solver.y = project(solver.y)
            solver.f = fun(solver.t, solver.y)
        yield t_old, solver.t, interpolant, solver.y


class _HermitianProjection:
    """Symmetrises ρ after each step and remembers the largest defect seen."""

    def __init__(self, n):
        self.n = n
        self.max_defect = 0.0

    def __call__(self, y):
        rho = y.reshape(self.n, self.n)
        defect = float(np.max(np.abs(rho - rho.conj().T)))
        if defect > self.max_defect:
            self.max_defect = defect
            if defect > HERMITICITY_MONITOR_TOL:
                logger.warning("pre-symmetrisation Hermiticity defect %.3e exceeds %.0e",
                               defect, HERMITICITY_MONITOR_TOL)
        return (0.5 * (rho + rho.conj().T)).reshape(-1)


def density_generator(params, drives):
    """Matrix-form Lindblad right-hand side ``f(t, vec ρ)`` for fixed drive flags."""
    c_list = [c.entries for c in collapse_operators(params)]
    return _MatrixGenerator(hamiltonian_parts(params, drives), c_list)


def density_steps(params, drives, rho0, t0, t1, rtol=RTOL, atol=ATOL, method="DOP853"):
    """Accepted steps of the master equation with constant drive flags.

    Args:
        rho0 (DensityMatrix | np.ndarray): State at t0 (flat arrays are accepted
            so callers can chain segments without re-wrapping).

    Yields:
        tuple: ``(t_old, t_new, interpolant, y_new)`` where ``y_new`` is the
        row-major flattened, symmetrised density matrix at ``t_new``.
    """
    fun = density_generator(params, drives)
    y0 = rho0.matrix.reshape(-1) if isinstance(rho0, DensityMatrix) else np.asarray(rho0).reshape(-1)
    projection = _HermitianProjection(fun.n)
    yield from adaptive_steps(fun, y0, t0, t1, rtol, atol, method, project=projection)
    logger.debug("density steps [%g, %g] with drives %s: max Hermiticity defect %.2e",
                 t0, t1, drives.label(), projection.max_defect)


def _as_density(layout, y):
    n = layout.total
    rho = np.asarray(y).reshape(n, n)
    return DensityMatrix(layout, 0.5 * (rho + rho.conj().T)).check(trace_tol=1e-7)


def evolve(params, schedule, rho0, t_grid, rtol=RTOL, atol=ATOL, method="DOP853"):
    """Propagate ρ under a piecewise-constant drive schedule.

    The integrator stops exactly at every segment boundary; with the c-field
    on, H(t) is re-evaluated at each stage time.

    Args:
        params (SwitchParams): Physical parameters.
        schedule (DriveSchedule | DriveState | str): Drive settings covering t_grid.
        rho0 (DensityMatrix): State at ``t_grid[0]``.
        t_grid (array-like): Strictly increasing sample times.

    Returns:
        list[DensityMatrix]: ρ at every grid time.

    Raises:
        StiffnessError: If the step size underflows.
    """
    t_grid = _check_grid(t_grid)
    schedule = DriveSchedule.coerce(schedule, t_grid[0], t_grid[-1])
    schedule.check_covers(t_grid)
    layout = params.layout
    if rho0.layout != layout:
        raise InvalidArgumentError(f"initial state layout {rho0.layout.dims} does not match {layout.dims}")

    samples = [rho0.matrix.reshape(-1)]
    k = 1
    while k < t_grid.size and t_grid[k] <= t_grid[0]:
        k += 1
    y = rho0.matrix.reshape(-1)
    t_now = t_grid[0]
    for segment in schedule.segments:
        if k >= t_grid.size:
            break
        if segment.end <= t_now:
            continue
        t_stop = min(segment.end, t_grid[-1])
        for _, t_new, interpolant, y_new in density_steps(
            params, segment.drives, y, t_now, t_stop, rtol, atol, method
        ):
            while k < t_grid.size and t_grid[k] <= t_new:
                samples.append(np.array(y_new) if t_grid[k] == t_new else interpolant(t_grid[k]))
                k += 1
            y = np.array(y_new)
        t_now = t_stop
    return [_as_density(layout, s) for s in samples]
