"""Exception types shared across the package.

The CLI maps ``ConfigError`` and ``InputError`` to exit code 1 and any other
``RuntimeError`` (``TrainingDiverged`` included) to exit code 2.
"""


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""


class InputError(ValueError):
    """Input data (audio, features, files, arrays) is malformed or inconsistent."""


class FormatError(InputError):
    """A file on disk does not match the expected container or record format."""


class TrainingDiverged(RuntimeError):
    """The training objective became non-finite."""

    def __init__(self, epoch: int, detail: str = ""):
        msg = f"training diverged at epoch {epoch}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.epoch = epoch
