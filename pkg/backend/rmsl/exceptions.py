"""
Domain errors shared by every app.

Each error carries the process exit code that the management commands
report, so callers never have to map exceptions by hand.
"""


class RMSLError(Exception):
    """Base class for all pipeline errors"""

    exit_code = 1

    def __init__(self, message, details=None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def __str__(self):
        if not self.details:
            return self.message
        rendered = ', '.join(f"{key}={value}" for key, value in self.details.items())
        return f"{self.message} ({rendered})"


class ConfigError(RMSLError):
    """Invalid experiment configuration; `details` maps field paths to messages"""

    exit_code = 2


class DataError(RMSLError):
    """Input data is missing, malformed or inconsistent"""

    exit_code = 3


class VocabMismatch(DataError):
    """A behavior code falls outside the vocabulary the model was built for"""


class TrainingDivergence(RMSLError):
    """A training loss became non-finite"""

    exit_code = 4
