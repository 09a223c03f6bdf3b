"""Derivative-free maximisation of the contrast D over the free operating-point parameters."""
import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from algorithms.analysis import DEFAULT_HORIZON, contrast_D, switching_times
from algorithms.switch_model import SwitchParams
from core.errors import InvalidArgumentError, SwitchSimError

logger = logging.getLogger(__name__)

FREE_PARAMETERS = ("theta_a", "g_a", "delta_small", "delta_cap")
_PARAM_FIELDS = {f.name for f in fields(SwitchParams)}


class _BudgetExhausted(Exception):
    pass


def default_bounds(params):
    """Θa ∈ [-2g_b, g_b], g_a ∈ [1e-3 g_b, g_b], δ ∈ [0, 2g_b], Δ ∈ [-g_b, g_b]."""
    gb = params.g_b
    if gb <= 0.0:
        raise InvalidArgumentError("default optimizer bounds scale with g_b, which must be > 0")
    return {
        "theta_a": (-2.0 * gb, gb),
        "g_a": (1e-3 * gb, gb),
        "delta_small": (0.0, 2.0 * gb),
        "delta_cap": (-gb, gb),
    }


def default_init(params):
    """Single-control optimum ratios, rescaled to the current g_b."""
    gb = params.g_b
    return {
        "theta_a": -0.01 * gb,
        "g_a": 0.14 * gb,
        "delta_small": 1.16 * gb,
        "delta_cap": 0.285 * gb,
    }


@dataclass(frozen=True)
class OptimizationSpec:
    """Settings for :func:`maximize_contrast`.

    Attributes:
        free (tuple[str]): Subset of theta_a, g_a, delta_small, delta_cap.
        bounds (dict | None): name -> (lo, hi); missing entries use
            :func:`default_bounds`.
        init (dict | None): Starting point; missing entries use
            :func:`default_init`, projected into the bounds.
        budget (int): Maximum objective evaluations over all restarts.
        tol (float): Simplex convergence threshold and the minimum D gain a
            restart must bring to trigger another one.
        dark_band (float): Points with |Θa + δ| below this score D = 0.
        restarts (int): Maximum restarts after the first descent.
        perturbation (float): Relative size of the restart kick.
    """

    free: tuple = FREE_PARAMETERS
    bounds: dict = None
    init: dict = None
    budget: int = 400
    tol: float = 1e-4
    dark_band: float = 0.05
    restarts: int = 3
    perturbation: float = 0.1

    def __post_init__(self):
        free = tuple(self.free)
        unknown = [name for name in free if name not in FREE_PARAMETERS]
        if not free or unknown or len(set(free)) != len(free):
            raise InvalidArgumentError(f"free parameters must be a non-empty subset of {FREE_PARAMETERS}, got {free}")
        object.__setattr__(self, "free", free)
        if int(self.budget) < 1:
            raise InvalidArgumentError(f"budget must be >= 1, got {self.budget}")
        if not self.tol > 0.0 or self.dark_band < 0.0 or self.restarts < 0 or self.perturbation < 0.0:
            raise InvalidArgumentError("tol must be > 0; dark_band, restarts and perturbation must be >= 0")

    def resolve(self, params):
        """Concrete (bounds, init) arrays ordered like ``free``."""
        bounds = default_bounds(params)
        bounds.update(self.bounds or {})
        init = default_init(params)
        init.update(self.init or {})
        lo = np.array([bounds[name][0] for name in self.free], dtype=float)
        hi = np.array([bounds[name][1] for name in self.free], dtype=float)
        if np.any(hi <= lo):
            raise InvalidArgumentError(f"optimizer bounds must satisfy lo < hi: {bounds}")
        x0 = np.array([init[name] for name in self.free], dtype=float)
        if np.any(x0 < lo) or np.any(x0 > hi):
            logger.warning("initial point %s outside bounds; projecting", dict(zip(self.free, x0)))
            x0 = np.clip(x0, lo, hi)
        return lo, hi, x0

    def in_dark_band(self, params):
        return abs(params.theta_a + params.delta_small) < self.dark_band


@dataclass(frozen=True, eq=False)
class OptimizationResult:
    params: SwitchParams
    D: float
    trace: pd.DataFrame = field(repr=False)
    converged: bool
    evaluations: int

    def optimum(self, names=FREE_PARAMETERS):
        return {name: getattr(self.params, name) for name in names}


def maximize_contrast(params, spec=None, seed=0):
    """Nelder–Mead on -D with bound projection and seeded restarts.

    When Θa is free the objective evaluates D at the candidate Θa directly;
    otherwise each evaluation runs the Θa line search of :func:`contrast_D`,
    and the returned params carry the Θa that search found for the best point.

    Returns:
        OptimizationResult: Best point found; ``converged`` is False when the
        evaluation budget ran out first.
    """
    spec = spec or OptimizationSpec()
    lo, hi, x0 = spec.resolve(params)
    search = "theta_a" not in spec.free
    # Θa is recorded even when it is not free: the line search moves it.
    columns = (*spec.free, "theta_a") if search else spec.free
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    trace = []

    def candidate(x):
        x = np.clip(x, lo, hi)
        return params.replace(**{name: float(v) for name, v in zip(spec.free, x)})

    def objective(x):
        if len(trace) >= spec.budget:
            raise _BudgetExhausted
        point = candidate(x)
        D = 0.0
        if search or not spec.in_dark_band(point):
            try:
                metrics = contrast_D(point, search=search)
                point = point.replace(theta_a=metrics.theta_a_star)
                # the searched Θa can itself land on the dark resonance
                if not spec.in_dark_band(point):
                    D = metrics.D
            except SwitchSimError as exc:
                logger.warning("objective failed at %s: %s", dict(zip(spec.free, x)), exc)
        trace.append({**{name: getattr(point, name) for name in columns}, "D": D})
        return -D

    def best_so_far():
        i = int(np.argmax([row["D"] for row in trace]))
        return np.array([trace[i][name] for name in spec.free]), trace[i]["D"], trace[i]["theta_a"]

    start = x0
    best_x, best_D, best_theta = x0, -math.inf, params.theta_a
    converged = False
    for attempt in range(spec.restarts + 1):
        remaining = spec.budget - len(trace)
        if remaining <= 0:
            break
        try:
            result = minimize(
                objective, start, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                options={"maxfev": remaining, "xatol": spec.tol, "fatol": spec.tol},
            )
            converged = bool(result.success) and len(trace) < spec.budget
        except _BudgetExhausted:
            converged = False
        x_new, D_new, theta_new = best_so_far()
        gain = D_new - best_D
        best_x, best_D, best_theta = x_new, D_new, theta_new
        logger.debug("descent %d: D = %.6f after %d evaluations", attempt, best_D, len(trace))
        if attempt > 0 and gain < spec.tol:
            break
        scale = spec.perturbation * np.maximum(np.abs(best_x), 1e-3 * (hi - lo))
        start = np.clip(best_x + rng.normal(size=best_x.size) * scale, lo, hi)
        if attempt < spec.restarts:
            logger.info("restarting simplex from perturbed best point (D = %.6f)", best_D)

    if len(trace) >= spec.budget:
        converged = False
        logger.warning("optimizer budget of %d evaluations exhausted (best D = %.6f)", spec.budget, best_D)
    best = candidate(best_x).replace(theta_a=best_theta)
    return OptimizationResult(
        params=best,
        D=float(best_D),
        trace=pd.DataFrame(trace, columns=[*columns, "D"]),
        converged=converged,
        evaluations=len(trace),
    )


def apply_swept_value(params, name, value):
    """Set one parameter; ``kappa`` sets κa = κb and rescales the drives by √κ.

    Drive strengths are E = α √(2κ_in), so at fixed incident photon flux they
    grow with the square root of the cavity decay rate.
    """
    if name == "kappa":
        value = float(value)
        if value <= 0.0 or params.kappa_a <= 0.0 or params.kappa_b <= 0.0:
            raise InvalidArgumentError("kappa sweeps need positive decay rates")
        scale_a = math.sqrt(value / params.kappa_a)
        scale_b = math.sqrt(value / params.kappa_b)
        return params.replace(
            kappa_a=value, kappa_b=value,
            eps_a=params.eps_a * scale_a,
            eps_b=params.eps_b * scale_b,
            eps_c=params.eps_c * scale_b,
        )
    if name not in _PARAM_FIELDS or name == "gamma_b":
        raise InvalidArgumentError(f"cannot sweep {name!r}")
    return params.replace(**{name: value})


def _warm_start(previous, swept, old_value, new_value):
    if swept != "g_b" or not old_value:
        return dict(previous)
    # optimum positions scale with g_b along the sweep
    ratio = new_value / old_value
    return {name: v * ratio for name, v in previous.items()}


def sweep(params, swept, grid, spec=None, seed=0, with_switching_times=True, horizon=DEFAULT_HORIZON):
    """Optimise D at each grid value, warm-started from the previous optimum.

    Per-point failures are logged and recorded in the ``error`` column; the
    sweep carries on.

    Returns:
        pd.DataFrame: One row per grid value with D, T_on, T_off,
        rate_relation, the operating point (every FREE_PARAMETERS entry),
        converged, evaluations and error.
    """
    spec = spec or OptimizationSpec()
    grid = [float(v) for v in grid]
    if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
        raise InvalidArgumentError("sweep grid must be non-empty and strictly increasing")
    rows = []
    previous, previous_value = None, None
    for value in grid:
        row = {swept: value, "D": math.nan, "T_on": math.nan, "T_off": math.nan,
               "rate_relation": math.nan, "converged": False, "evaluations": 0, "error": ""}
        row.update({name: math.nan for name in FREE_PARAMETERS if name != swept})
        try:
            point = apply_swept_value(params, swept, value)
            point_spec = spec
            if previous is not None:
                point_spec = replace(spec, init=_warm_start(previous, swept, previous_value, value))
            result = maximize_contrast(point, point_spec, seed)
            row.update(result.optimum())
            row.update(D=result.D, converged=result.converged, evaluations=result.evaluations)
            previous, previous_value = result.optimum(spec.free), value
            if with_switching_times:
                metrics = switching_times(result.params, horizon=horizon)
                row.update(T_on=metrics.T_on, T_off=metrics.T_off, rate_relation=metrics.rate_relation)
        except SwitchSimError as exc:
            exc.annotate(**{swept: value})
            logger.error("sweep point %s=%g failed: %s", swept, value, exc)
            row["error"] = str(exc)
        rows.append(row)
    operating = [name for name in FREE_PARAMETERS if name != swept]
    columns = [swept, "D", "T_on", "T_off", "rate_relation", *operating, "converged", "evaluations", "error"]
    return pd.DataFrame(rows, columns=columns)
