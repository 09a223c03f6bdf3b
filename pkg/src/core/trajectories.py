"""Monte Carlo wave-function trajectories and seeded ensembles.

Trajectory ``i`` of an ensemble draws from its own stream
``SeedSequence(seed, spawn_key=(i,))``, so results depend only on
(seed, index) and never on how trajectories are spread over workers.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.optimize import bisect

from algorithms.switch_model import channel_labels, collapse_operators, hamiltonian_parts, switch_operators
from core.dynamics import ATOL, RTOL, _check_grid, adaptive_steps
from core.errors import InvalidArgumentError, SolverError
from core.operators import StateVector

logger = logging.getLogger(__name__)

JUMP_TIME_RTOL = 1e-6


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    """One MCWF trajectory.

    Attributes:
        times (np.ndarray): Sample grid.
        states (tuple[StateVector]): Normalised state at every grid time.
        jumps (tuple[tuple[float, int]]): ``(time, channel)`` pairs, times
            strictly increasing; channels index ``channel_labels``.
        seed (int): Master seed.
        stream (int): Stream index under the master seed.
        channel_labels (tuple[str]): Mirror-resolved channel names.
    """

    times: np.ndarray
    states: tuple
    jumps: tuple
    seed: int
    stream: int
    channel_labels: tuple

    def expect(self, op):
        return np.array([op.expect(s).real for s in self.states])

    def jump_counts(self):
        counts = dict.fromkeys(self.channel_labels, 0)
        for _, channel in self.jumps:
            counts[self.channel_labels[channel]] += 1
        return counts

    def jumps_frame(self, channels=None):
        """Jump log as a DataFrame, optionally filtered to the named channels."""
        rows = [
            {"t_gamma_b": t, "channel": self.channel_labels[k]}
            for t, k in self.jumps
            if channels is None or self.channel_labels[k] in channels
        ]
        return pd.DataFrame(rows, columns=["t_gamma_b", "channel"])


def _norm2(psi):
    return float(np.vdot(psi, psi).real)


def _locate_jump(interpolant, t_old, t_new, threshold):
    def excess(t):
        return _norm2(interpolant(t)) - threshold

    if excess(t_new) >= 0.0:
        return t_new
    if excess(t_old) <= 0.0:
        return t_old
    return bisect(excess, t_old, t_new, xtol=1e-14, rtol=JUMP_TIME_RTOL)


def mcwf_trajectory(params, drives, psi0, t_grid, seed, stream=0, rtol=RTOL, atol=ATOL, method="DOP853"):
    """First-order MCWF trajectory with mirror-resolved jump channels.

    The unnormalised state evolves under H_eff = H - (i/2) Σ c†c until its
    squared norm falls to a pre-drawn uniform threshold r. The crossing time is
    bisected on the step interpolant, a channel k is picked with probability
    proportional to ‖c_k ψ‖², and the integration restarts from c_k ψ / ‖c_k ψ‖
    with a fresh r.

    Raises:
        InvalidArgumentError: If ``psi0`` is not normalised or has the wrong layout.
    """
    t_grid = _check_grid(t_grid)
    layout = params.layout
    if psi0.layout != layout:
        raise InvalidArgumentError(f"initial state layout {psi0.layout.dims} does not match {layout.dims}")
    if abs(psi0.norm() - 1.0) > 1e-9:
        raise InvalidArgumentError(f"initial state must be normalised, norm is {psi0.norm():.12f}")

    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))
    labels = tuple(channel_labels(params, mirror_resolved=True))
    jump_ops = [c.entries for c in collapse_operators(params, mirror_resolved=True)]
    decay = sum((c.conj().T @ c for c in jump_ops), np.zeros((layout.total, layout.total), dtype=complex))
    parts = hamiltonian_parts(params, drives)

    def fun(t, psi):
        return -1j * ((parts.at(t) - 0.5j * decay) @ psi)

    psi = np.array(psi0.amplitudes)
    snapshots = [psi / np.sqrt(_norm2(psi))]
    jumps = []
    k = 1
    t_now, t_end = t_grid[0], t_grid[-1]
    threshold = rng.random()
    while t_now < t_end and k < t_grid.size:
        jumped = False
        for t_old, t_new, interpolant, y_new in adaptive_steps(fun, psi, t_now, t_end, rtol, atol, method):
            if _norm2(y_new) <= threshold:
                t_jump = _locate_jump(interpolant, t_old, t_new, threshold)
                while k < t_grid.size and t_grid[k] < t_jump:
                    phi = interpolant(t_grid[k])
                    snapshots.append(phi / np.sqrt(_norm2(phi)))
                    k += 1
                before = interpolant(t_jump)
                weights = np.array([_norm2(c @ before) for c in jump_ops])
                total = weights.sum()
                if not total > 0.0:
                    raise SolverError("norm decayed but every jump channel is empty", time=float(t_jump))
                channel = int(rng.choice(len(jump_ops), p=weights / total))
                after = jump_ops[channel] @ before
                psi = after / np.sqrt(_norm2(after))
                # bisection can return the previous jump time; recorded jump times stay strictly increasing
                if jumps and t_jump <= jumps[-1][0]:
                    t_jump = np.nextafter(jumps[-1][0], np.inf)
                jumps.append((float(t_jump), channel))
                t_now = t_jump
                threshold = rng.random()
                jumped = True
                break
            while k < t_grid.size and t_grid[k] <= t_new:
                phi = np.array(y_new) if t_grid[k] == t_new else interpolant(t_grid[k])
                snapshots.append(phi / np.sqrt(_norm2(phi)))
                k += 1
            psi = np.array(y_new)
            t_now = t_new
        if not jumped:
            break
    # a jump landing exactly on t_end leaves the last grid point unsampled
    while len(snapshots) < t_grid.size:
        snapshots.append(psi / np.sqrt(_norm2(psi)))

    states = tuple(StateVector(layout, s) for s in snapshots)
    return TrajectoryRecord(t_grid, states, tuple(jumps), int(seed), int(stream), labels)


def default_observables(params):
    """Populations and photon numbers, keyed by their CSV column stems."""
    ops = switch_operators(params.n_a, params.n_b)
    return {
        "pop_G": ops.operator("proj_g"),
        "pop_H": ops.operator("proj_h"),
        "pop_E": ops.operator("proj_e"),
        "n_a": ops.operator("num_a"),
        "n_b": ops.operator("num_b"),
    }


def _trajectory_task(task):
    params, drives, psi0, t_grid, seed, stream, observables = task
    record = mcwf_trajectory(params, drives, psi0, t_grid, seed, stream)
    values = np.array([record.expect(op) for op in observables.values()])
    return stream, values, record.jumps, record.channel_labels


@dataclass(frozen=True, eq=False)
class EnsembleResult:
    """Merged ensemble statistics.

    Attributes:
        means, stderrs (pd.DataFrame): One column per observable, one row per
            grid time; stderr is the standard error of the mean.
        jump_counts (pd.DataFrame): Jumps per trajectory (rows) and channel.
        jumps (pd.DataFrame): Full jump log with a ``trajectory`` column.
    """

    times: np.ndarray
    means: pd.DataFrame
    stderrs: pd.DataFrame
    jump_counts: pd.DataFrame
    jumps: pd.DataFrame
    seed: int
    n_trajectories: int

    def to_frame(self):
        frame = pd.DataFrame({"t_gamma_b": self.times})
        for name in self.means.columns:
            frame[f"{name}_mean"] = self.means[name].to_numpy()
            frame[f"{name}_stderr"] = self.stderrs[name].to_numpy()
        return frame


def run_ensemble(params, drives, psi0, t_grid, n_trajectories, seed, observables=None, workers=1):
    """Run ``n_trajectories`` seeded trajectories and merge them by index.

    Args:
        observables (dict[str, Operator] | None): Defaults to
            :func:`default_observables`.
        workers (int): Process count; 1 runs in-process. Output is identical
            for every value.
    """
    if n_trajectories < 1:
        raise InvalidArgumentError(f"need at least one trajectory, got {n_trajectories}")
    t_grid = _check_grid(t_grid)
    observables = dict(observables or default_observables(params))
    tasks = [(params, drives, psi0, t_grid, seed, i, observables) for i in range(n_trajectories)]
    logger.info("running %d trajectories (seed %d, %d worker(s))", n_trajectories, seed, workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_trajectory_task, tasks))
    else:
        results = [_trajectory_task(task) for task in tasks]
    results.sort(key=lambda item: item[0])

    stacked = np.stack([values for _, values, _, _ in results])  # (traj, obs, time)
    names = list(observables)
    means = stacked.mean(axis=0)
    if n_trajectories > 1:
        stderrs = stacked.std(axis=0, ddof=1) / np.sqrt(n_trajectories)
    else:
        stderrs = np.zeros_like(means)
    labels = results[0][3]
    count_rows, jump_rows = [], []
    for stream, _, jumps, _ in results:
        counts = dict.fromkeys(labels, 0)
        for t, channel in jumps:
            counts[labels[channel]] += 1
            jump_rows.append({"trajectory": stream, "t_gamma_b": t, "channel": labels[channel]})
        count_rows.append(counts)
    return EnsembleResult(
        times=t_grid,
        means=pd.DataFrame(means.T, columns=names),
        stderrs=pd.DataFrame(stderrs.T, columns=names),
        jump_counts=pd.DataFrame(count_rows, columns=list(labels)),
        jumps=pd.DataFrame(jump_rows, columns=["trajectory", "t_gamma_b", "channel"]),
        seed=int(seed),
        n_trajectories=int(n_trajectories),
    )
