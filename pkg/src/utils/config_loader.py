"""Scenario configuration files.

Configs are INI files read with ``configparser`` and checked against a strict
schema: unknown sections and keys are rejected with the offending line number,
every value is type-converted, and the block required by the chosen scenario
must be present.
"""
import configparser
import logging
import math
import os
import re
from dataclasses import MISSING, dataclass, fields, replace

from algorithms.analysis import SET_RESET_SCHEDULE
from algorithms.optimizer import FREE_PARAMETERS, OptimizationSpec
from algorithms.switch_model import SwitchParams
from core.dynamics import MAX_SPARSE_SUPEROP_DIM, DriveSchedule
from core.errors import ConfigError, InvalidArgumentError
from core.operators import LEVELS

logger = logging.getLogger(__name__)

SCENARIOS = ("steady", "scan", "evolve", "mc", "switch-times", "relay", "optimize", "sweep")

# Blocks each scenario needs besides [params] and [run].
SCENARIO_BLOCKS = {
    "steady": ("steady",),
    "scan": ("scan",),
    "evolve": ("evolve",),
    "mc": ("mc",),
    "switch-times": ("switch_times",),
    "relay": ("relay",),
    "optimize": ("optimize",),
    "sweep": ("sweep", "optimize"),
}

DRIVE_LABELS = ("off", "a", "c", "a+c")
INITIAL_STATES = ("H00", "G00", "steady-off", "steady-on")
JUMP_FILTERS = ("transmitted", "all")

_REQUIRED = object()


# --- value converters ---

def _float(text):
    text = text.strip()
    match = re.fullmatch(r"sqrt\((.+)\)", text)
    value = math.sqrt(float(match.group(1))) if match else float(text)
    if not math.isfinite(value):
        raise ValueError(f"{text!r} is not finite")
    return value


def _int(text):
    return int(text.strip())


def _bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


def _str(text):
    return text.strip()


def _choice(options):
    def convert(text):
        value = text.strip()
        if value not in options:
            raise ValueError(f"{value!r} is not one of {', '.join(options)}")
        return value
    return convert


def _float_list(text):
    return tuple(_float(item) for item in text.split(",") if item.strip())


def _level_list(text):
    levels = tuple(item.strip() for item in text.split(",") if item.strip())
    for level in levels:
        if level not in LEVELS:
            raise ValueError(f"{level!r} is not a lambda level ({', '.join(LEVELS)})")
    return levels


def _free_list(text):
    names = tuple(item.strip() for item in text.split(",") if item.strip())
    for name in names:
        if name not in FREE_PARAMETERS:
            raise ValueError(f"{name!r} cannot be optimised; choose from {', '.join(FREE_PARAMETERS)}")
    return names


def _schedule(text):
    try:
        DriveSchedule.parse(text)
    except InvalidArgumentError as exc:
        raise ValueError(str(exc)) from None
    return text.strip()


def _param_schema():
    schema = {}
    for f in fields(SwitchParams):
        converter = _int if f.name in ("n_a", "n_b") else _float
        default = _REQUIRED if f.default is MISSING else f.default
        schema[f.name] = (converter, default)
    return schema


SCHEMA = {
    "params": _param_schema(),
    "run": {
        "scenario": (_choice(SCENARIOS), _REQUIRED),
        "seed": (_int, 0),
        "output": (_str, "results/run"),
        "fock_convergence_check": (_bool, True),
        "fock_gate_step": (_int, 2),
        "fock_gate_tol": (_float, 1e-4),
    },
    "steady": {
        "drives": (_choice(DRIVE_LABELS), "a"),
        "support": (_level_list, ()),
    },
    "scan": {
        "theta_a_start": (_float, _REQUIRED),
        "theta_a_stop": (_float, _REQUIRED),
        "points": (_int, 201),
    },
    "evolve": {
        "schedule": (_schedule, _REQUIRED),
        "points": (_int, 201),
        "initial": (_choice(INITIAL_STATES), "steady-off"),
    },
    "mc": {
        "drives": (_choice(DRIVE_LABELS), "a"),
        "t_end": (_float, _REQUIRED),
        "points": (_int, 100),
        "trajectories": (_int, 200),
        "initial": (_choice(("H00", "G00")), "H00"),
        "workers": (_int, 1),
        "jump_channels": (_choice(JUMP_FILTERS), "transmitted"),
    },
    "switch_times": {
        "search": (_bool, True),
        "window": (_float_list, ()),
        "horizon": (_float, 1e5),
        "time_tol": (_float, 1e-3),
    },
    "relay": {
        "schedule": (_schedule, SET_RESET_SCHEDULE),
        "points": (_int, 1001),
        "initial": (_choice(("H00", "G00")), "H00"),
    },
    "optimize": {
        "free": (_free_list, FREE_PARAMETERS),
        "init": (_choice(("params", "default")), "params"),
        "budget": (_int, 400),
        "tol": (_float, 1e-4),
        "dark_band": (_float, 0.05),
        "restarts": (_int, 3),
        "perturbation": (_float, 0.1),
    },
    "sweep": {
        "parameter": (_str, _REQUIRED),
        "values": (_float_list, _REQUIRED),
        "switching_times": (_bool, True),
        "horizon": (_float, 1e5),
    },
}


def _line_of(text, section, key=None):
    """1-based line of ``[section]`` or of ``key`` inside it, None if absent."""
    current = None
    key_re = re.compile(rf"^\s*{re.escape(key)}\s*[=:]") if key else None
    for number, line in enumerate(text.splitlines(), start=1):
        header = re.match(r"^\s*\[([^\]]+)\]", line)
        if header:
            current = header.group(1).strip()
            if key is None and current == section:
                return number
            continue
        if key_re is not None and current == section and key_re.match(line):
            return number
    return None


@dataclass(frozen=True)
class ScenarioConfig:
    """A fully parsed and type-converted scenario config.

    Attributes:
        blocks (dict[str, dict]): Converted scenario blocks with defaults filled.
        present (frozenset[str]): Keys (``section.key``) written in the file,
            so ``validate`` can tell defaults from explicit values.
    """

    path: str
    scenario: str
    params: SwitchParams
    seed: int
    output: str
    fock_convergence_check: bool
    fock_gate_step: int
    fock_gate_tol: float
    blocks: dict
    present: frozenset = frozenset()

    def block(self, name):
        return self.blocks[name]

    def optimization_spec(self):
        block = self.blocks["optimize"]
        init = None
        if block["init"] == "params":
            init = {name: getattr(self.params, name) for name in block["free"]}
        return OptimizationSpec(
            free=block["free"], init=init, budget=block["budget"], tol=block["tol"],
            dark_band=block["dark_band"], restarts=block["restarts"],
            perturbation=block["perturbation"],
        )

    def with_overrides(self, seed=None, output=None, trajectories=None, n_a=None, n_b=None):
        """Apply command-line overrides."""
        config = self
        if seed is not None:
            config = replace(config, seed=int(seed))
        if output is not None:
            config = replace(config, output=str(output))
        if trajectories is not None:
            if "mc" not in config.blocks:
                raise ConfigError("--trajectories needs an [mc] block", key="mc.trajectories")
            blocks = dict(config.blocks)
            blocks["mc"] = {**blocks["mc"], "trajectories": int(trajectories)}
            config = replace(config, blocks=blocks)
        if n_a is not None or n_b is not None:
            try:
                params = config.params.with_cutoffs(
                    n_a if n_a is not None else config.params.n_a,
                    n_b if n_b is not None else config.params.n_b,
                )
            except InvalidArgumentError as exc:
                raise ConfigError(str(exc), key="params.n_a/n_b") from None
            config = replace(config, params=params)
        return config


def _convert_section(parser, text, section, required_here):
    schema = SCHEMA[section]
    values = {}
    for key in parser[section]:
        if key not in schema:
            raise ConfigError(
                f"unknown key in [{section}]; allowed: {', '.join(sorted(schema))}",
                line=_line_of(text, section, key), key=f"{section}.{key}",
            )
    for key, (converter, default) in schema.items():
        if key in parser[section]:
            try:
                values[key] = converter(parser[section][key])
            except ValueError as exc:
                raise ConfigError(
                    f"invalid value {parser[section][key]!r}: {exc}",
                    line=_line_of(text, section, key), key=f"{section}.{key}",
                ) from None
        elif default is _REQUIRED:
            if required_here:
                raise ConfigError(
                    "missing required key", line=_line_of(text, section), key=f"{section}.{key}"
                )
        else:
            values[key] = default
    return values


def parse_config(text, path="<string>"):
    """Parse config text into a :class:`ScenarioConfig`.

    Raises:
        ConfigError: With line and key diagnostics for every schema violation.
    """
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";"), default_section="__defaults__"
    )
    parser.optionxform = str
    try:
        parser.read_string(text, source=path)
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", line=exc.lineno) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError("duplicate key", line=exc.lineno, key=f"{exc.section}.{exc.option}") from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any section", line=exc.lineno) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", line=line) from None

    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(
                f"unknown section [{section}]; allowed: {', '.join(sorted(SCHEMA))}",
                line=_line_of(text, section),
            )
    for section in ("params", "run"):
        if section not in parser:
            raise ConfigError(f"missing [{section}] section")

    run = _convert_section(parser, text, "run", True)
    scenario = run["scenario"]
    for section in SCENARIO_BLOCKS[scenario]:
        if section not in parser:
            raise ConfigError(f"scenario {scenario!r} needs a [{section}] section", key=section)

    raw_params = _convert_section(parser, text, "params", True)
    try:
        params = SwitchParams(**raw_params)
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc), line=_line_of(text, "params"), key="params") from None

    blocks = {}
    for section in SCHEMA:
        if section in ("params", "run"):
            continue
        if section in parser:
            blocks[section] = _convert_section(parser, text, section, True)
    if run["fock_gate_step"] < 1:
        raise ConfigError("must be >= 1", line=_line_of(text, "run", "fock_gate_step"), key="run.fock_gate_step")
    if not run["fock_gate_tol"] > 0.0:
        raise ConfigError("must be > 0", line=_line_of(text, "run", "fock_gate_tol"), key="run.fock_gate_tol")
    _check_blocks(blocks, text)

    present = frozenset(f"{s}.{k}" for s in parser.sections() for k in parser[s])
    return ScenarioConfig(
        path=path,
        scenario=scenario,
        params=params,
        seed=run["seed"],
        output=run["output"],
        fock_convergence_check=run["fock_convergence_check"],
        fock_gate_step=run["fock_gate_step"],
        fock_gate_tol=run["fock_gate_tol"],
        blocks=blocks,
        present=present,
    )


def _check_blocks(blocks, text):
    def fail(section, key, message):
        raise ConfigError(message, line=_line_of(text, section, key), key=f"{section}.{key}")

    for section in ("scan", "evolve", "mc", "relay"):
        if section in blocks and blocks[section]["points"] < 2:
            fail(section, "points", "need at least 2 points")
    if "scan" in blocks and not blocks["scan"]["theta_a_stop"] > blocks["scan"]["theta_a_start"]:
        fail("scan", "theta_a_stop", "theta_a_stop must exceed theta_a_start")
    if "mc" in blocks:
        if blocks["mc"]["trajectories"] < 1:
            fail("mc", "trajectories", "need at least one trajectory")
        if not blocks["mc"]["t_end"] > 0.0:
            fail("mc", "t_end", "t_end must be > 0")
    if "switch_times" in blocks:
        window = blocks["switch_times"]["window"]
        if window and (len(window) != 2 or window[1] <= window[0]):
            fail("switch_times", "window", "window must be 'lo, hi' with lo < hi")
    if "sweep" in blocks:
        values = blocks["sweep"]["values"]
        if any(b <= a for a, b in zip(values, values[1:])):
            fail("sweep", "values", "sweep values must be strictly increasing")
        name = blocks["sweep"]["parameter"]
        if name != "kappa" and (name not in SCHEMA["params"] or name == "gamma_b"):
            fail("sweep", "parameter", f"cannot sweep {name!r}")
    if "optimize" in blocks and blocks["optimize"]["budget"] < 1:
        fail("optimize", "budget", "budget must be >= 1")


def load_config(path):
    """Read and parse a config file.

    Raises:
        ConfigError: If the file is missing or does not satisfy the schema.
    """
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    config = parse_config(text, path=path)
    logger.debug("loaded %s (scenario %s)", path, config.scenario)
    return config


def validate_config(config):
    """Invariant checks beyond the schema; returns a list of warning strings."""
    warnings_found = []
    params = config.params
    if "optimize" in config.blocks:
        band = config.blocks["optimize"]["dark_band"]
        if abs(params.theta_a + params.delta_small) < band:
            warnings_found.append(
                f"theta_a + delta_small = {params.theta_a + params.delta_small:.4g} lies inside the "
                f"dark-state band (|.| < {band}); the optimizer scores such points D = 0"
            )
    if config.fock_convergence_check:
        raised = 3 * (params.n_a + config.fock_gate_step) * (params.n_b + config.fock_gate_step)
        if raised * raised > MAX_SPARSE_SUPEROP_DIM:
            warnings_found.append(
                f"Fock gate at cutoffs +{config.fock_gate_step} needs a superoperator of dimension "
                f"{raised * raised}, above the sparse limit {MAX_SPARSE_SUPEROP_DIM}"
            )
    if params.eps_b == 0.0 and config.scenario in ("scan", "switch-times", "optimize", "sweep"):
        warnings_found.append("eps_b = 0: contrast and normalised photon numbers are undefined")
    return warnings_found


def resolved_settings(config):
    """Every setting with its value and whether it came from the file or a default."""
    rows = []
    for name, value in config.params.to_dict().items():
        rows.append(("params", name, value, f"params.{name}" in config.present))
    run = {
        "scenario": config.scenario, "seed": config.seed, "output": config.output,
        "fock_convergence_check": config.fock_convergence_check,
        "fock_gate_step": config.fock_gate_step, "fock_gate_tol": config.fock_gate_tol,
    }
    for name, value in run.items():
        rows.append(("run", name, value, f"run.{name}" in config.present))
    for section, values in config.blocks.items():
        for name, value in values.items():
            rows.append((section, name, value, f"{section}.{name}" in config.present))
    return rows
