"""Figures of merit of the switch.

Everything here is built on the steady-state and evolution solvers in
``core.dynamics``: normalised photon numbers, the resonance scan over the
a-drive detuning, the contrast D, the switching times T_on / T_off, the
set-reset relay protocol, photon budgets and the Fock-cutoff gate.
"""
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar

from algorithms.switch_model import (
    A_DRIVE_ON,
    DRIVES_OFF,
    DriveState,
    collapse_operators,
    hamiltonian,
    lambda_support,
    single_excitation_matrix,
    switch_operators,
)
from core.dynamics import DriveSchedule, density_steps, evolve, liouvillian, steady_state
from core.errors import ConvergenceGateError, HorizonError, InvalidArgumentError, SwitchSimError
from core.operators import basis_state

logger = logging.getLogger(__name__)

DEFAULT_HORIZON = 1e5
DEFAULT_TIME_TOL = 1e-3
REFINE_XATOL = 1e-4
COARSE_POINTS = 81

SET_RESET_SCHEDULE = "a:0-2000, c:2000-4000, off:4000-6000, a:6000-8000, off:8000-10000"


def normalizations(params):
    """Resonant empty-cavity photon numbers (⟨a†a⟩₀, ⟨b†b⟩₀) = ((E_a/κ_a)², (E_b/κ_b)²)."""
    if params.kappa_a == 0.0 or params.kappa_b == 0.0:
        raise InvalidArgumentError("normalizations need kappa_a > 0 and kappa_b > 0")
    return (params.eps_a / params.kappa_a) ** 2, (params.eps_b / params.kappa_b) ** 2


def steady_density(params, drives, support=None):
    """Steady state for static drive flags.

    Args:
        support (Sequence[str] | None): Lambda levels spanning an invariant
            sector (e.g. ``("G",)`` for an empty cavity); None solves on the
            full space.
    """
    if drives.c_on and params.eps_c != 0.0:
        raise InvalidArgumentError("no steady state with the time-dependent c-field on")
    L = liouvillian(hamiltonian(params, drives), collapse_operators(params))
    indices = None if support is None else lambda_support(params.layout, support)
    return steady_state(L, indices)


def observables_of(params, rho):
    ops = switch_operators(params.n_a, params.n_b)
    b_mean = ops.operator("b").expect(rho)
    return {
        "pop_G": ops.operator("proj_g").expect(rho).real,
        "pop_H": ops.operator("proj_h").expect(rho).real,
        "pop_E": ops.operator("proj_e").expect(rho).real,
        "n_a": ops.operator("num_a").expect(rho).real,
        "n_b": ops.operator("num_b").expect(rho).real,
        "b_re": b_mean.real,
        "b_im": b_mean.imag,
    }


def steady_observables(params, drives, support=None):
    """Populations, photon numbers and ⟨b⟩ of the steady state."""
    return observables_of(params, steady_density(params, drives, support))


def _b_photons(params, drives):
    rho = steady_density(params, drives)
    return switch_operators(params.n_a, params.n_b).operator("num_b").expect(rho).real


def _normalized(values, norm):
    values = np.asarray(values, dtype=float)
    if norm == 0.0:
        return np.full_like(values, np.nan)
    return values / norm


@dataclass(frozen=True, eq=False)
class ScanResult:
    """Steady-state photon numbers along a Θ_a grid.

    Attributes:
        curves (dict[str, np.ndarray]): ``n_a_on``, ``n_b_on`` and ``n_b_off``,
            each divided by its empty-cavity normalisation.
        markers (np.ndarray): Θ_a resonance positions from the one-excitation block.
        eigenvalues (np.ndarray): Raw eigenvalues of the one-excitation block.
    """

    swept: str
    grid: np.ndarray
    curves: dict
    markers: np.ndarray
    eigenvalues: np.ndarray
    normalizations: tuple

    @property
    def off_spread(self):
        off = self.curves["n_b_off"]
        return float(np.max(off) - np.min(off))

    def minimum(self, curve="n_b_on"):
        """Grid value at the global minimum of a curve."""
        return float(self.grid[int(np.argmin(self.curves[curve]))])

    def local_minima(self, curve="n_b_on"):
        values = self.curves[curve]
        inner = np.flatnonzero((values[1:-1] < values[:-2]) & (values[1:-1] < values[2:])) + 1
        return self.grid[inner]

    def to_frame(self):
        return pd.DataFrame({
            self.swept: self.grid,
            "n_a_on_over_n_a0": self.curves["n_a_on"],
            "n_b_on_over_n_b0": self.curves["n_b_on"],
            "n_b_off_over_n_b0": self.curves["n_b_off"],
        })


def resonance_scan(params, grid):
    """Steady states with the a-drive on and off at every Θ_a of ``grid``.

    Raises:
        SwitchSimError: Solver failures, annotated with the failing Θ_a.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise InvalidArgumentError("scan grid must be a non-empty 1-D sequence")
    if np.any(np.diff(grid) <= 0.0):
        raise InvalidArgumentError("scan grid must be strictly increasing")
    n_a0, n_b0 = normalizations(params)
    n_a_on, n_b_on, n_b_off = [], [], []
    for theta in grid:
        point = params.replace(theta_a=float(theta))
        try:
            on = steady_observables(point, A_DRIVE_ON)
            off = steady_observables(point, DRIVES_OFF)
        except SwitchSimError as exc:
            raise exc.annotate(theta_a=float(theta))
        n_a_on.append(on["n_a"])
        n_b_on.append(on["n_b"])
        n_b_off.append(off["n_b"])
    spectrum = single_excitation_matrix(params)
    result = ScanResult(
        swept="theta_a",
        grid=grid,
        curves={
            "n_a_on": _normalized(n_a_on, n_a0),
            "n_b_on": _normalized(n_b_on, n_b0),
            "n_b_off": _normalized(n_b_off, n_b0),
        },
        markers=np.sort(spectrum.theta_a_resonances),
        eigenvalues=spectrum.eigenvalues,
        normalizations=(n_a0, n_b0),
    )
    if result.off_spread > 1e-9:
        logger.warning("off-state curve varies by %.3e across the scan", result.off_spread)
    return result


@dataclass(frozen=True, eq=False)
class SwitchMetrics:
    """Contrast and switching times at one operating point.

    ``on_transient`` / ``off_transient`` hold ⟨b†b⟩/⟨b†b⟩₀ against time up to
    the respective crossing, when switching times were computed.
    """

    D: float
    b_on: float
    b_off: float
    b_0: float
    theta_a_star: float
    boundary_maximum: bool = False
    T_on: float = None
    T_off: float = None
    on_transient: pd.DataFrame = field(default=None, repr=False)
    off_transient: pd.DataFrame = field(default=None, repr=False)

    @property
    def rate_relation(self):
        """T_off / (T_on + T_off), which tracks D when D is close to one."""
        if self.T_on is None or self.T_off is None:
            return None
        return self.T_off / (self.T_on + self.T_off)

    def to_dict(self):
        out = {k: v for k, v in asdict(self).items() if k not in ("on_transient", "off_transient")}
        out["rate_relation"] = self.rate_relation
        return out


def _coarse_candidates(lo, hi, markers, points):
    inside = np.sort(markers[(markers > lo) & (markers < hi)])
    mids = 0.5 * (inside[1:] + inside[:-1])
    return np.unique(np.concatenate([np.linspace(lo, hi, points), inside, mids]))


def contrast_D(params, window=None, search=True, coarse_points=COARSE_POINTS):
    """Contrast D = (⟨b†b⟩_off - ⟨b†b⟩_on) / ⟨b†b⟩₀, maximised over Θ_a.

    The coarse grid is seeded with the resonance markers and their midpoints
    because the landscape has several narrow dips; the best coarse point is
    refined by bounded scalar minimisation to 1e-4.

    Args:
        window (tuple[float, float] | None): Θ_a search interval; defaults to
            the marker span widened by 2 on each side.
        search (bool): False evaluates D at ``params.theta_a`` only.

    Returns:
        SwitchMetrics: With D, b_on, b_off, b_0 and theta_a_star filled.
    """
    _, b_0 = normalizations(params)
    if b_0 == 0.0:
        raise InvalidArgumentError("contrast is undefined with the signal drive off")
    b_off = _b_photons(params, DRIVES_OFF)
    cache = {}

    def score(theta):
        theta = float(theta)
        if theta not in cache:
            try:
                b_on = _b_photons(params.replace(theta_a=theta), A_DRIVE_ON)
            except SwitchSimError as exc:
                raise exc.annotate(theta_a=theta)
            cache[theta] = ((b_off - b_on) / b_0, b_on)
        return cache[theta]

    if not search:
        D, b_on = score(params.theta_a)
        return SwitchMetrics(D=D, b_on=b_on, b_off=b_off, b_0=b_0, theta_a_star=params.theta_a)

    markers = single_excitation_matrix(params).theta_a_resonances
    lo, hi = window if window is not None else (float(markers.min()) - 2.0, float(markers.max()) + 2.0)
    if not hi > lo:
        raise InvalidArgumentError(f"search window must satisfy lo < hi, got ({lo}, {hi})")
    if not np.any((markers > lo) & (markers < hi)):
        logger.warning("Θa window [%g, %g] contains no resonance marker", lo, hi)
    candidates = _coarse_candidates(lo, hi, markers, coarse_points)
    values = np.array([score(c)[0] for c in candidates])
    best = int(np.argmax(values))
    left = candidates[max(best - 1, 0)]
    right = candidates[min(best + 1, candidates.size - 1)]
    theta_star = float(candidates[best])
    if right > left:
        refined = minimize_scalar(
            lambda x: -score(x)[0], bounds=(left, right), method="bounded",
            options={"xatol": REFINE_XATOL},
        )
        if -refined.fun > values[best]:
            theta_star = float(refined.x)
    D, b_on = score(theta_star)
    boundary = min(theta_star - lo, hi - theta_star) <= REFINE_XATOL
    if boundary:
        logger.warning("contrast maximum sits on the window boundary at Θa = %.4f", theta_star)
    logger.info("D = %.4f at Θa = %.4f (%d steady-state solves)", D, theta_star, len(cache) + 1)
    return SwitchMetrics(
        D=D, b_on=b_on, b_off=b_off, b_0=b_0, theta_a_star=theta_star, boundary_maximum=boundary
    )


def _flat_expectation(op, n):
    weights = np.ascontiguousarray(op.entries.T).reshape(-1)

    def value(y):
        # tr(Oρ) with ρ stored row-major
        return float(np.dot(weights, np.asarray(y).reshape(n * n)).real)

    return value


def _first_crossing(params, drives, rho0, observable, threshold, direction, horizon, time_tol):
    if direction not in ("down", "up"):
        raise InvalidArgumentError(f"direction must be 'down' or 'up', got {direction!r}")
    sign = -1.0 if direction == "down" else 1.0
    value = _flat_expectation(observable, params.layout.total)
    y0 = rho0.matrix.reshape(-1)
    last = value(y0)
    times, values = [0.0], [last]
    if (last - threshold) * sign >= 0.0:
        return 0.0, times, values
    for t_old, t_new, interpolant, y_new in density_steps(params, drives, y0, 0.0, horizon):
        last = value(y_new)
        if (last - threshold) * sign >= 0.0:
            lo, hi = t_old, t_new
            while hi - lo > time_tol:
                mid = 0.5 * (lo + hi)
                if (value(interpolant(mid)) - threshold) * sign >= 0.0:
                    hi = mid
                else:
                    lo = mid
            crossing = 0.5 * (lo + hi)
            times.append(crossing)
            values.append(value(interpolant(crossing)))
            return crossing, times, values
        times.append(t_new)
        values.append(last)
    raise HorizonError(
        f"observable never crossed {threshold:.6g} ({direction}) within the horizon",
        last_value=last, horizon=horizon,
    )


def crossing_time(params, drives, rho0, observable, threshold, direction="down",
                  horizon=DEFAULT_HORIZON, time_tol=DEFAULT_TIME_TOL):
    """First time ⟨observable⟩ crosses ``threshold`` evolving ρ₀ under fixed drives.

    Raises:
        HorizonError: If no crossing happens before ``horizon``.
    """
    return _first_crossing(params, drives, rho0, observable, threshold, direction, horizon, time_tol)[0]


def switching_times(params, horizon=DEFAULT_HORIZON, time_tol=DEFAULT_TIME_TOL):
    """T_on and T_off at ``params.theta_a``.

    T_on is the time for ⟨b†b⟩, started from the drive-off steady state with the
    a-drive switched on, to fall to (b_off - b_on)/e + b_on. T_off mirrors it:
    from the drive-on steady state with the a-drive off, up to
    b_off - (b_off - b_on)/e.

    Raises:
        InvalidArgumentError: If there is no contrast (b_off <= b_on).
        HorizonError: If a threshold is not reached within ``horizon``.
    """
    _, b_0 = normalizations(params)
    rho_off = steady_density(params, DRIVES_OFF)
    rho_on = steady_density(params, A_DRIVE_ON)
    num_b = switch_operators(params.n_a, params.n_b).operator("num_b")
    b_off, b_on = num_b.expect(rho_off).real, num_b.expect(rho_on).real
    if not b_off > b_on:
        raise InvalidArgumentError(f"no contrast at this point (b_off={b_off:.6g}, b_on={b_on:.6g})")
    gap = (b_off - b_on) / math.e
    try:
        t_on, on_t, on_v = _first_crossing(params, A_DRIVE_ON, rho_off, num_b, b_on + gap, "down", horizon, time_tol)
        t_off, off_t, off_v = _first_crossing(params, DRIVES_OFF, rho_on, num_b, b_off - gap, "up", horizon, time_tol)
    except SwitchSimError as exc:
        raise exc.annotate(theta_a=params.theta_a)
    logger.info("T_on = %.1f, T_off = %.1f", t_on, t_off)

    def transient(times, values):
        return pd.DataFrame({"t_gamma_b": times, "n_b_over_n_b0": _normalized(values, b_0)})

    return SwitchMetrics(
        D=(b_off - b_on) / b_0 if b_0 else math.nan,
        b_on=b_on, b_off=b_off, b_0=b_0,
        theta_a_star=params.theta_a,
        T_on=t_on, T_off=t_off,
        on_transient=transient(on_t, on_v),
        off_transient=transient(off_t, off_v),
    )


def set_reset_schedule():
    """a-drive, c-field, off, a-drive, off; 2000/γ_b each."""
    return DriveSchedule.parse(SET_RESET_SCHEDULE)


def relay_protocol(params, schedule=None, t_grid=None, initial=None):
    """Run the set-reset relay under a piecewise drive schedule.

    Args:
        schedule (DriveSchedule | str | None): Defaults to :func:`set_reset_schedule`.
        t_grid (array-like | None): Defaults to 1001 points over the schedule.
        initial (DensityMatrix | None): Defaults to |H,0,0⟩.

    Returns:
        pd.DataFrame: Columns t_gamma_b, drives, pop_G, pop_H, pop_E,
        n_a_over_n_a0, n_b_over_n_b0.
    """
    if schedule is None:
        schedule = set_reset_schedule()
    elif t_grid is not None:
        schedule = DriveSchedule.coerce(schedule, t_grid[0], t_grid[-1])
    elif isinstance(schedule, DriveState):
        raise InvalidArgumentError("a constant drive setting needs an explicit t_grid")
    else:
        schedule = DriveSchedule.coerce(schedule, None, None)
    if t_grid is None:
        t_grid = np.linspace(schedule.start, schedule.end, 1001)
    if initial is None:
        initial = basis_state(params.layout, "H", 0, 0).to_density()
    n_a0, n_b0 = normalizations(params)
    states = evolve(params, schedule, initial, t_grid)
    rows = [observables_of(params, rho) for rho in states]
    frame = pd.DataFrame(rows)
    labels = []
    for t in np.asarray(t_grid, dtype=float):
        label = schedule.segments[-1].drives.label()
        for seg in schedule.segments:
            if seg.start <= t < seg.end:
                label = seg.drives.label()
                break
        labels.append(label)
    return pd.DataFrame({
        "t_gamma_b": np.asarray(t_grid, dtype=float),
        "drives": labels,
        "pop_G": frame["pop_G"],
        "pop_H": frame["pop_H"],
        "pop_E": frame["pop_E"],
        "n_a_over_n_a0": _normalized(frame["n_a"], n_a0),
        "n_b_over_n_b0": _normalized(frame["n_b"], n_b0),
    })


def photon_budget(params, T):
    """Photons sent at the cavity during T: (|α_a|²T, |α_b|²T), |α_i|² = E_i²/(2κ_i,in)."""
    if T < 0:
        raise InvalidArgumentError(f"duration must be >= 0, got {T}")
    counts = []
    for mode, eps in (("a", params.eps_a), ("b", params.eps_b)):
        if eps == 0.0:
            counts.append(0.0)
            continue
        kappa_in = params.kappa_in(mode)
        if kappa_in == 0.0:
            raise InvalidArgumentError(f"mode {mode} is driven but has no input coupling")
        counts.append(eps * eps / (2.0 * kappa_in) * T)
    return tuple(counts)


@dataclass(frozen=True)
class GateReport:
    """Relative change of each headline metric under raised Fock cutoffs."""

    base_cutoffs: tuple
    raised_cutoffs: tuple
    base: dict
    raised: dict
    deltas: dict
    tol: float

    @property
    def passed(self):
        return all(d < self.tol for d in self.deltas.values())

    def raise_if_failed(self):
        if not self.passed:
            worst = max(self.deltas, key=self.deltas.get)
            raise ConvergenceGateError(
                f"Fock cutoff gate failed: {worst} changed by {self.deltas[worst]:.3e} "
                f"(tolerance {self.tol:.0e}) going {self.base_cutoffs} -> {self.raised_cutoffs}",
                deltas=self.deltas,
            )
        return self

    def to_dict(self):
        return {
            "base_cutoffs": list(self.base_cutoffs),
            "raised_cutoffs": list(self.raised_cutoffs),
            "deltas": dict(self.deltas),
            "tol": self.tol,
            "passed": self.passed,
        }


def _relative_change(base, raised):
    scale = max(abs(base), abs(raised))
    return 0.0 if scale == 0.0 else abs(raised - base) / scale


def fock_convergence_gate(evaluate, params, step=2, tol=1e-4):
    """Re-run ``evaluate`` with both cutoffs raised by ``step`` and compare.

    Args:
        evaluate (Callable[[SwitchParams], dict[str, float]]): Headline metrics.
    """
    if step < 1:
        raise InvalidArgumentError(f"gate step must be >= 1, got {step}")
    raised_params = params.with_cutoffs(params.n_a + step, params.n_b + step)
    base = {k: float(v) for k, v in evaluate(params).items()}
    raised = {k: float(v) for k, v in evaluate(raised_params).items()}
    deltas = {k: _relative_change(base[k], raised[k]) for k in base}
    report = GateReport(
        base_cutoffs=(params.n_a, params.n_b),
        raised_cutoffs=(raised_params.n_a, raised_params.n_b),
        base=base, raised=raised, deltas=deltas, tol=tol,
    )
    logger.info("Fock gate %s -> %s: %s", report.base_cutoffs, report.raised_cutoffs,
                "passed" if report.passed else "FAILED")
    return report
