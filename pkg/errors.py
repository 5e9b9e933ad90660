"""
Exception hierarchy shared by every module, plus the CLI exit-code mapping.
"""

from typing import Dict, List, Optional


class AccentCLError(Exception):
    """Base class for all errors raised by the pipeline"""


class ConfigError(AccentCLError):
    """Invalid or unknown configuration key/value"""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class UsageError(AccentCLError):
    """Bad command-line usage (missing required flag etc.)"""


class VocabularyError(AccentCLError):
    """Character or token outside the 33-label vocabulary"""


class DimensionError(AccentCLError):
    """Tensor shape mismatch"""


class DomainError(AccentCLError):
    """Value outside the domain of an operation (e.g. log of non-positive)"""


class DegenerateVectorError(AccentCLError):
    """Vector too close to zero to normalize"""


class ContractError(AccentCLError):
    """Precondition of an operation violated"""


class NonFiniteError(AccentCLError):
    """NaN or Inf produced by a forward op"""


class GenerationError(AccentCLError):
    """Synthetic corpus generation failed"""


class AugmentError(AccentCLError):
    """Invalid augmentation configuration for the given frames"""


class CheckpointError(AccentCLError):
    """Checkpoint unreadable or incompatible with the model config"""

    def __init__(self, message: str, matrix: Optional[str] = None):
        super().__init__(message)
        self.matrix = matrix


class DivergenceError(AccentCLError):
    """Training loss became NaN"""

    def __init__(self, message: str, step: int = -1, recent: Optional[List[Dict[str, float]]] = None):
        super().__init__(message)
        self.step = step
        self.recent = recent or []


class MetricError(AccentCLError):
    """Metric undefined for the given input"""


class DegenerateDataError(AccentCLError):
    """Data rank too low for the requested projection"""


EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code"""
    if isinstance(exc, (ConfigError, UsageError)):
        return EXIT_USAGE
    return EXIT_RUNTIME
