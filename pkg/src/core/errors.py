"""Exception hierarchy shared by the solvers, the analysis layer and the CLI."""


class SwitchSimError(Exception):
    """Base class for every error raised by the simulator.

    Attributes:
        context (dict): Extra diagnostics (failing detuning, scenario name, ...)
            accumulated while the error travels up the call stack.
    """

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = dict(context)

    def annotate(self, **context):
        """Attach more context and return self so it can be re-raised inline."""
        self.context.update(context)
        return self

    def __str__(self):
        base = super().__str__()
        if not self.context:
            return base
        details = ", ".join(f"{k}={v}" for k, v in sorted(self.context.items()))
        return f"{base} [{details}]"


class InvalidArgumentError(SwitchSimError, ValueError):
    pass


class InvalidDimensionError(InvalidArgumentError):
    pass


class SolverError(SwitchSimError):
    pass


class MultipleSteadyStatesError(SolverError):
    def __init__(self, message, null_dimension, **context):
        super().__init__(message, null_dimension=null_dimension, **context)
        self.null_dimension = null_dimension


class StiffnessError(SolverError):
    def __init__(self, message, time, **context):
        super().__init__(message, time=time, **context)
        self.time = time


class HorizonError(SolverError):
    def __init__(self, message, last_value, horizon, **context):
        super().__init__(message, last_value=last_value, horizon=horizon, **context)
        self.last_value = last_value
        self.horizon = horizon


class UnphysicalStateError(SolverError):
    pass


class ConfigError(SwitchSimError):
    """Raised for malformed or inconsistent scenario configs.

    Attributes:
        line (int | None): 1-based line number in the config file, if known.
        key (str | None): Offending ``section.key``.
    """

    def __init__(self, message, line=None, key=None, **context):
        super().__init__(message, **context)
        self.line = line
        self.key = key

    def __str__(self):
        where = []
        if self.line is not None:
            where.append(f"line {self.line}")
        if self.key is not None:
            where.append(f"key '{self.key}'")
        prefix = f"{', '.join(where)}: " if where else ""
        return prefix + super().__str__()


class ConvergenceGateError(SwitchSimError):
    def __init__(self, message, deltas, **context):
        super().__init__(message, **context)
        self.deltas = dict(deltas)
