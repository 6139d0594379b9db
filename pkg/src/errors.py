from enum import IntEnum


class ExitCode(IntEnum):
    OK = 0
    CONFIG = 2
    TRAINING_FAILED = 3
    MISSING_ARTIFACT = 4


class DonetError(Exception):
    exit_code: ExitCode = ExitCode.CONFIG


class ShapeError(DonetError, ValueError):
    @classmethod
    def mismatch(cls, op: str, a: tuple, b: tuple) -> "ShapeError":
        return cls(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class GraphError(DonetError, RuntimeError):
    pass


class NonFiniteError(DonetError, FloatingPointError):
    def __init__(self, message: str, *, step: int | None = None):
        super().__init__(message)
        self.step = step


class ConvergenceError(DonetError, RuntimeError):
    def __init__(self, message: str, *, iterations: int | None = None):
        super().__init__(message)
        self.iterations = iterations


class SingularJacobianError(ConvergenceError):
    def __init__(self, message: str, *, condition: float, iterations: int | None = None):
        super().__init__(f"{message} (condition estimate {condition:.3e})", iterations=iterations)
        self.condition = condition


class FormatError(DonetError, ValueError):
    pass


class ConfigError(DonetError, ValueError):
    def __init__(self, message: str, *, section: str | None = None):
        super().__init__(f"[{section}] {message}" if section else message)
        self.section = section


class ArtifactError(DonetError, FileNotFoundError):
    exit_code = ExitCode.MISSING_ARTIFACT


class TrainingFailed(DonetError):
    exit_code = ExitCode.TRAINING_FAILED


class IncompatibleModelsError(DonetError, ValueError):
    pass


class ZeroGradientError(DonetError, ValueError):
    pass


class DomainError(DonetError, ValueError):
    pass
