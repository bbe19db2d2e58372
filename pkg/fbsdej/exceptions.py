"""Error taxonomy shared by the solvers and the command line front end.

Each class carries the exit code the CLI reports for it.
"""


class SolverError(Exception):
    """Base class for every error raised deliberately by this package."""

    exit_code = 1
    kind = "solver"

    def to_dict(self) -> dict:
        return {"error": self.kind, "message": str(self)}


class ConfigError(SolverError, ValueError):
    """Schema or syntax violation in a run configuration."""

    exit_code = 2
    kind = "config"

    def __init__(self, message, key=None, line=None):
        super().__init__(message)
        self.key = key
        self.line = line

    def __str__(self):
        message = super().__str__()
        if self.key is not None and self.line is not None:
            return f"{message} (key '{self.key}', line {self.line})"
        if self.key is not None:
            return f"{message} (key '{self.key}')"
        return message

    def to_dict(self) -> dict:
        payload = super().to_dict()
        if self.key is not None:
            payload["key"] = self.key
        if self.line is not None:
            payload["line"] = self.line
        return payload


class NumericalError(SolverError, ArithmeticError):
    """A computation produced values that cannot be trusted."""

    exit_code = 3
    kind = "numerical"


class DivergenceError(NumericalError):
    """Non-finite state, adjoint or integrand.

    `step` is the time step where the rollout blew up, `node_kind` the tape
    operation whose adjoint went non-finite. `report` may hold the partial
    training report up to the last good checkpoint.
    """

    kind = "divergence"

    def __init__(self, message, step=None, node_kind=None, report=None):
        super().__init__(message)
        self.step = step
        self.node_kind = node_kind
        self.report = report

    def to_dict(self) -> dict:
        payload = super().to_dict()
        if self.step is not None:
            payload["step"] = int(self.step)
        if self.node_kind is not None:
            payload["node_kind"] = self.node_kind
        return payload


class IllConditionedError(NumericalError):
    """Regression Gram matrix too ill-conditioned to solve reliably."""

    kind = "ill_conditioned"

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number

    def to_dict(self) -> dict:
        payload = super().to_dict()
        if self.condition_number is not None:
            payload["condition_number"] = float(self.condition_number)
        return payload
