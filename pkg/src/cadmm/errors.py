class ConfigError(ValueError):
    """Invalid configuration or scenario parameters."""


class AgentFailure(RuntimeError):
    """An agent's local subproblem could not be solved.

    ``diagnostics`` maps agent id to a human readable description of what
    went wrong (e.g. which constraint family is infeasible).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class RoundAborted(RuntimeError):
    """A synchronous exchange round could not complete."""
