class FedHEError(Exception):
    ...

class ParameterError(FedHEError):
    ...

class SecurityError(ParameterError):
    ...

class LevelExhaustedError(FedHEError):
    ...

class ScaleOverflowError(FedHEError):
    ...

class MissingKeyError(FedHEError):
    ...

class ShareError(FedHEError):
    ...

class BootstrapConstraintError(FedHEError):
    ...

class PackingError(FedHEError):
    ...

class ApproximationError(FedHEError):
    ...

class ProtocolError(FedHEError):
    ...

class WireHygieneError(ProtocolError):
    ...

class PlanningError(FedHEError):
    ...

class SerializationError(FedHEError):
    ...


class ConfigError(FedHEError):
    """ Run-config problem, reported as path:line: message """

    def __init__(self, message: str, path = None, line = None) -> None:
        self.path = path
        self.line = line
        location = ''
        if path is not None:
            location = f'{path}:{line}: ' if line is not None else f'{path}: '
        super().__init__(f'{location}{message}')


class TrainingException(Exception):
    ...

class TrainingEndedEarly(TrainingException):
    ...

class TrainingComplete(TrainingException):
    ...
