import argparse
import logging
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from algorithms.analysis import (
    contrast_D,
    fock_convergence_gate,
    normalizations,
    photon_budget,
    relay_protocol,
    resonance_scan,
    steady_density,
    steady_observables,
    switching_times,
)
from algorithms.optimizer import FREE_PARAMETERS, apply_swept_value, maximize_contrast, sweep
from algorithms.switch_model import A_DRIVE_ON, DRIVES_OFF, drive_state
from core.dynamics import DriveSchedule
from core.errors import ConfigError, ConvergenceGateError, SwitchSimError
from core.operators import basis_state
from core.trajectories import run_ensemble
from utils.config_loader import SCENARIO_BLOCKS, SCENARIOS, load_config, resolved_settings, validate_config
from utils.results_writer import write_series, write_summary

logger = logging.getLogger("main_runner")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_GATE = 4

# Jump channels kept in the jump CSV unless jump_channels = all.
TRANSMITTED_CHANNELS = ("a_out", "b_out", "spont_H", "spont_G")


@dataclass
class ScenarioOutcome:
    """What a scenario runner hands back to the CLI.

    ``gate`` maps a SwitchParams (with raised cutoffs) to the headline metrics
    the Fock-cutoff gate compares; None disables the gate for the scenario.
    """

    metrics: dict
    series: dict = field(default_factory=dict)
    gate: object = None


# --- HELPER FUNCTIONS ---

def _initial_density(params, label):
    if label == "H00":
        return basis_state(params.layout, "H", 0, 0).to_density()
    if label == "G00":
        return basis_state(params.layout, "G", 0, 0).to_density()
    if label == "steady-off":
        return steady_density(params, DRIVES_OFF)
    return steady_density(params, A_DRIVE_ON)


def _segment_summary(frame, schedule):
    """Observables at the end of every schedule segment."""
    rows = []
    times = frame["t_gamma_b"].to_numpy()
    for i, seg in enumerate(schedule.segments):
        inside = np.flatnonzero((times >= seg.start) & (times <= seg.end))
        if inside.size == 0:
            continue
        first, last = frame.iloc[inside[0]], frame.iloc[inside[-1]]
        rows.append({
            "segment": i,
            "drives": seg.drives.label(),
            "start": seg.start,
            "end": seg.end,
            "pop_G": float(last["pop_G"]),
            "pop_H": float(last["pop_H"]),
            "pop_E": float(last["pop_E"]),
            "n_b_over_n_b0": float(last["n_b_over_n_b0"]),
            "pop_H_change": float(last["pop_H"] - first["pop_H"]),
        })
    return rows


def _dominant_populations(rows):
    return {f"segment{row['segment']}_dominant_pop": max(row["pop_G"], row["pop_H"]) for row in rows}


# --- SCENARIO RUNNERS ---

def run_steady(config):
    block = config.block("steady")
    drives = drive_state(block["drives"])
    support = block["support"] or None
    observables = steady_observables(config.params, drives, support)
    print(f"-> b photons: {observables['n_b']:.8f}, pop_G = {observables['pop_G']:.6f}")

    def gate(params):
        return {"b_photons": steady_observables(params, drives, support)["n_b"]}

    return ScenarioOutcome(
        metrics={"drives": block["drives"], "b_photons": observables["n_b"], "observables": observables},
        gate=gate,
    )


def run_scan(config):
    block = config.block("scan")
    grid = np.linspace(block["theta_a_start"], block["theta_a_stop"], block["points"])
    result = resonance_scan(config.params, grid)
    theta_min = result.minimum()
    print(f"-> minimum of n_b_on at theta_a = {theta_min:.4f}; markers {np.round(result.markers, 4)}")
    n_b0 = result.normalizations[1]

    def gate(params):
        on = steady_observables(params.replace(theta_a=theta_min), A_DRIVE_ON)
        return {"n_b_on_at_minimum": on["n_b"] / n_b0}

    return ScenarioOutcome(
        metrics={
            "theta_a_at_minimum": theta_min,
            "n_b_on_minimum": float(np.min(result.curves["n_b_on"])),
            "local_minima": result.local_minima(),
            "markers": result.markers,
            "eigenvalues": result.eigenvalues.real,
            "eigenvalues_minus_h00": result.eigenvalues.real - (config.params.theta_a + config.params.delta_small),
            "off_spread": result.off_spread,
        },
        series={"scan": result.to_frame()},
        gate=gate,
    )


def _run_schedule(config, schedule, points, initial):
    grid = np.linspace(schedule.start, schedule.end, points)

    def simulate(params):
        return relay_protocol(params, schedule, grid, _initial_density(params, initial))

    frame = simulate(config.params)
    segments = _segment_summary(frame, schedule)
    for row in segments:
        print(f"-> segment {row['segment']} ({row['drives']}) ends with pop_G = {row['pop_G']:.4f}, "
              f"pop_H = {row['pop_H']:.4f}")

    def gate(params):
        return _dominant_populations(_segment_summary(simulate(params), schedule))

    return frame, segments, gate


def run_evolve(config):
    block = config.block("evolve")
    schedule = DriveSchedule.parse(block["schedule"])
    frame, segments, gate = _run_schedule(config, schedule, block["points"], block["initial"])
    return ScenarioOutcome(
        metrics={"schedule": schedule.to_text(), "segments": segments},
        series={"evolve": frame},
        gate=gate,
    )


def run_relay(config):
    block = config.block("relay")
    schedule = DriveSchedule.parse(block["schedule"])
    frame, segments, gate = _run_schedule(config, schedule, block["points"], block["initial"])
    off_drift = [abs(row["pop_H_change"]) for row in segments if row["drives"] == "off"]
    return ScenarioOutcome(
        metrics={
            "schedule": schedule.to_text(),
            "segments": segments,
            "max_pop_H_drift_drives_off": max(off_drift) if off_drift else None,
        },
        series={"relay": frame},
        gate=gate,
    )


def run_mc(config):
    block = config.block("mc")
    params = config.params
    drives = drive_state(block["drives"])
    grid = np.linspace(0.0, block["t_end"], block["points"])

    def simulate(p):
        return run_ensemble(p, drives, basis_state(p.layout, block["initial"][0], 0, 0), grid,
                            block["trajectories"], config.seed, workers=block["workers"])

    ensemble = simulate(params)
    totals = ensemble.jump_counts.sum(axis=0)
    duration = block["trajectories"] * block["t_end"]
    jumps = ensemble.jumps
    if block["jump_channels"] == "transmitted":
        jumps = jumps[jumps["channel"].isin(TRANSMITTED_CHANNELS)]
    final = ensemble.means.iloc[-1]
    print(f"-> {block['trajectories']} trajectories, {int(totals.sum())} jumps in total")

    def gate(p):
        means = simulate(p).means.iloc[-1]
        return {"pop_G_final": means["pop_G"], "pop_H_final": means["pop_H"]}

    return ScenarioOutcome(
        metrics={
            "drives": block["drives"],
            "trajectories": block["trajectories"],
            "final_means": final.to_dict(),
            "jump_totals": totals.to_dict(),
            "jump_rates": (totals / duration).to_dict(),
        },
        series={"ensemble": ensemble.to_frame(), "jumps": jumps.reset_index(drop=True)},
        gate=gate,
    )


def run_switch_times(config):
    block = config.block("switch_times")
    params = config.params
    window = tuple(block["window"]) or None
    contrast = contrast_D(params, window=window, search=block["search"])
    point = params.replace(theta_a=contrast.theta_a_star)
    print(f"-> D = {contrast.D:.4f} at theta_a = {contrast.theta_a_star:.4f}")
    times = switching_times(point, horizon=block["horizon"], time_tol=block["time_tol"])
    print(f"-> T_on = {times.T_on:.1f}, T_off = {times.T_off:.1f}")
    on_a, on_b = photon_budget(point, times.T_on)
    off_a, off_b = photon_budget(point, times.T_off)

    def gate(p):
        return {"D": contrast_D(p.replace(theta_a=contrast.theta_a_star), search=False).D}

    metrics = contrast.to_dict()
    metrics.update(T_on=times.T_on, T_off=times.T_off, rate_relation=times.T_off / (times.T_on + times.T_off))
    metrics["photons_during_T_on"] = {"a": on_a, "b": on_b}
    metrics["photons_during_T_off"] = {"a": off_a, "b": off_b}
    return ScenarioOutcome(
        metrics=metrics,
        series={"on_transient": times.on_transient, "off_transient": times.off_transient},
        gate=gate,
    )


def run_optimize(config):
    spec = config.optimization_spec()
    result = maximize_contrast(config.params, spec, seed=config.seed)
    print(f"-> optimized D = {result.D:.4f} after {result.evaluations} evaluations")
    optimum = result.optimum()

    def gate(p):
        return {"D": contrast_D(p.replace(**optimum), search=False).D}

    return ScenarioOutcome(
        metrics={"D": result.D, "optimum": optimum, "converged": result.converged,
                 "evaluations": result.evaluations},
        series={"trace": result.trace},
        gate=gate,
    )


def run_sweep(config):
    block = config.block("sweep")
    spec = config.optimization_spec()
    frame = sweep(config.params, block["parameter"], block["values"], spec, seed=config.seed,
                  with_switching_times=block["switching_times"], horizon=block["horizon"])
    ok = frame[frame["error"] == ""]
    print(f"-> {len(ok)}/{len(frame)} sweep points optimized")
    swept = block["parameter"]

    def gate(p):
        out = {}
        for _, row in ok.iterrows():
            point = apply_swept_value(p, swept, row[swept]).replace(
                **{name: float(row[name]) for name in FREE_PARAMETERS}
            )
            out[f"D_at_{swept}={row[swept]:g}"] = contrast_D(point, search=False).D
        return out

    return ScenarioOutcome(
        metrics={"parameter": swept, "points": frame.to_dict(orient="records")},
        series={"sweep": frame},
        gate=gate,
    )


RUNNERS = {
    "steady": run_steady,
    "scan": run_scan,
    "evolve": run_evolve,
    "mc": run_mc,
    "switch-times": run_switch_times,
    "relay": run_relay,
    "optimize": run_optimize,
    "sweep": run_sweep,
}


# --- COMMANDS ---

def run_command(args):
    config = load_config(args.config).with_overrides(
        seed=args.seed, output=args.out, trajectories=args.trajectories,
        n_a=args.fock_na, n_b=args.fock_nb,
    )
    print(f"\n{'#' * 60}")
    print(f"SCENARIO: {config.scenario} ({config.path})")
    print(f"Cutoffs: n_a={config.params.n_a}, n_b={config.params.n_b}, seed={config.seed}")
    print(f"{'#' * 60}")

    logger.debug("resolved params: %s", config.params.to_dict())
    start_time = time.time()
    try:
        outcome = RUNNERS[config.scenario](config)
        report = None
        if config.fock_convergence_check and outcome.gate is not None:
            print(f"-> Fock gate: cutoffs +{config.fock_gate_step}...")
            report = fock_convergence_gate(outcome.gate, config.params, config.fock_gate_step,
                                           config.fock_gate_tol)
    except SwitchSimError as exc:
        raise exc.annotate(scenario=config.scenario)
    duration = time.time() - start_time

    n_a0, n_b0 = normalizations(config.params)
    written = []
    for name, frame in outcome.series.items():
        written.append(write_series(config.output, name, frame))
    summary = {
        "scenario": config.scenario,
        "config": config.path,
        "seed": config.seed,
        "params": config.params.to_dict(),
        "normalizations": {"n_a0": n_a0, "n_b0": n_b0},
        "metrics": outcome.metrics,
        "fock_gate": report.to_dict() if report is not None else {"enabled": False},
        "series": sorted(written),
        "wall_time_s": duration,
    }
    summary_file = write_summary(config.output, summary)
    print(f"\n[SYSTEM] Results saved to {summary_file}")
    for path in written:
        print(f"[SYSTEM] Series saved to {path}")
    if report is not None:
        report.raise_if_failed()
    return EXIT_OK


def validate_command(args):
    config = load_config(args.config)
    print(f"[SYSTEM] {config.path}: scenario {config.scenario} is valid")
    for section, name, value, explicit in resolved_settings(config):
        suffix = "" if explicit else "  (default)"
        print(f"  {section}.{name} = {value}{suffix}")
    for message in validate_config(config):
        print(f"[WARNING] {message}")
    return EXIT_OK


def scenarios_command(args):
    for name in SCENARIOS:
        print(f"{name:<14} needs [{'], ['.join(SCENARIO_BLOCKS[name])}]")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="main_runner.py",
        description="Two-mode cavity QED all-optical switch simulator.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", parents=[common], help="run the scenario of a config file")
    run.add_argument("config", help="path to a .cfg scenario file")
    run.add_argument("--seed", type=int, default=None, help="override [run] seed")
    run.add_argument("--out", default=None, help="output path prefix")
    run.add_argument("--trajectories", type=int, default=None, help="override [mc] trajectories")
    run.add_argument("--fock-na", type=int, default=None, help="override the mode-a Fock cutoff")
    run.add_argument("--fock-nb", type=int, default=None, help="override the mode-b Fock cutoff")
    run.set_defaults(handler=run_command)

    validate = commands.add_parser("validate", parents=[common], help="check a config without running it")
    validate.add_argument("config")
    validate.set_defaults(handler=validate_command)

    listing = commands.add_parser("scenarios", parents=[common], help="list scenarios")
    listing.set_defaults(handler=scenarios_command)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="[%(levelname)s] %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"[ERROR] config: {exc}")
        return EXIT_CONFIG
    except ConvergenceGateError as exc:
        print(f"[ERROR] {exc}")
        return EXIT_GATE
    except SwitchSimError as exc:
        print(f"[ERROR] {exc}")
        return EXIT_SOLVER


# --- MAIN EXECUTION BLOCK ---
if __name__ == "__main__":
    sys.exit(main())
