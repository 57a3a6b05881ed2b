"""
difftox: differential testing and per-pass fault localization for graph optimizers
"""

__version__ = "1.0.0"

from .core_types import FaultReport, ModelDescriptor, Outcome, OutcomeClass, RunConfig, Task
from .localizer import classify_outcome, evaluate, localize
from .mock_backends import FaultScenario, make_mock_backend
from .reporting import RunReport, summarize

__all__ = [
    'FaultReport',
    'ModelDescriptor',
    'Outcome',
    'OutcomeClass',
    'RunConfig',
    'Task',
    'classify_outcome',
    'evaluate',
    'localize',
    'FaultScenario',
    'make_mock_backend',
    'RunReport',
    'summarize',
]
