"""
Error hierarchy for the differential-testing framework

Framework errors derive from DifftoxError. Faults found in the system under
test (optimizer crashes, run crashes, shape mismatches) are evidence and are
turned into result values before they reach the CLI.
"""

from typing import Optional, Sequence


class DifftoxError(Exception):
    """Base class for every framework error"""


class InvariantError(DifftoxError, ValueError):
    """A domain value was constructed in violation of its invariants"""


class NotFound(DifftoxError, FileNotFoundError):
    """A local file (model, config, dataset) does not exist"""


class InvalidArtifact(DifftoxError):
    """A model artifact is unreadable or empty"""


class HubUnavailable(DifftoxError):
    """The hub manifest or a model download could not be reached"""


class ModelNotInHub(DifftoxError):
    """No manifest entry matches the requested (name, opset)"""


class ChecksumMismatch(DifftoxError):
    """Downloaded bytes do not hash to the manifest digest"""

    def __init__(self, name: str, expected: str, actual: str):
        super().__init__(
            f"Checksum mismatch for {name}: expected {expected}, got {actual}"
        )
        self.name = name
        self.expected = expected
        self.actual = actual


class ConfigError(DifftoxError, ValueError):
    """Settings or run configuration is invalid"""


class EmptyDataset(DifftoxError):
    """A dataset resolved to zero usable inputs"""


class BackendUnavailable(DifftoxError):
    """An optimizer or runner backend cannot be reached"""

    def __init__(self, message: str, pass_index: Optional[int] = None):
        super().__init__(message)
        self.pass_index = pass_index


class UnknownPass(DifftoxError, KeyError):
    """A pass name is not in the registry (caller error, never a fault)"""

    def __init__(self, names: Sequence[str], valid: Sequence[str] = ()):
        self.names = list(names)
        self.valid = list(valid)
        message = f"Unknown pass(es): {', '.join(self.names)}"
        if self.valid:
            message += f". Valid passes: {', '.join(self.valid)}"
        super().__init__(message)

    def __str__(self) -> str:
        return self.args[0]


class RunCrash(DifftoxError):
    """The inference backend crashed or could not load a model"""

    def __init__(self, diagnostics: str):
        super().__init__(diagnostics.strip().splitlines()[0] if diagnostics.strip() else "run crash")
        self.diagnostics = diagnostics


class ComparatorError(DifftoxError, ValueError):
    """A comparator received inputs on which its metric is undefined"""


class InvalidK(ComparatorError):
    """Top-K cutoff must be a positive integer"""


class InvalidBox(ComparatorError):
    """Box corners are not ordered (x1 <= x2, y1 <= y2)"""


class PipelineError(DifftoxError):
    """Pipeline stages were supplied in an inconsistent combination"""


class ReportError(DifftoxError):
    """A report is inconsistent or has an unsupported schema version"""
