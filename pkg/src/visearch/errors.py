"""Exception hierarchy shared by every module.

The CLI maps each class onto a distinct process exit code.
"""


class VisearchError(Exception):
    exit_code = 1


class RejectedInput(VisearchError, ValueError):
    """Caller passed arguments that violate an operation's preconditions."""

    exit_code = 1


class ConfigError(VisearchError):
    exit_code = 3


class CorruptionError(VisearchError):
    """A persisted file failed a structural check."""

    exit_code = 4

    def __init__(self, check: str, path=None):
        self.check = check
        self.path = path
        where = f" ({path})" if path is not None else ""
        super().__init__(f"{check}{where}")


class ClusterUnavailable(VisearchError):
    exit_code = 5
