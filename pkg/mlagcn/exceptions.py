class AgcnError(Exception):
    """Base class for every error raised by mlagcn."""
    exit_code = 2


class ValidationError(AgcnError):
    """Bad input: config, data files, shapes or call contracts. Exit code 1."""
    exit_code = 1


class ConfigError(ValidationError):
    pass


class ContractError(ValidationError):
    pass


class ShapeError(ContractError):
    pass


class NonFiniteError(ContractError):
    pass


class DataFormatError(ValidationError):
    def __init__(self, message, path=None, line_number=None):
        self.path = path
        self.line_number = line_number
        if line_number is not None:
            message = "{}:{}: {}".format(path, line_number, message)
        elif path is not None:
            message = "{}: {}".format(path, message)
        super().__init__(message)


class UsageError(ValidationError):
    pass


class RunFailure(AgcnError):
    """The inputs were fine but the run could not complete. Exit code 2."""
    exit_code = 2


class StateError(RunFailure):
    pass


class DivergenceError(RunFailure):
    pass


class GradcheckFailure(RunFailure):
    pass
