"""Exception hierarchy shared across the package."""


class NestFedError(Exception):
    """Base class; ``category`` selects the CLI exit code."""

    category = "error"
    exit_code = 1


class DimensionError(NestFedError, ValueError):
    category = "dimension"
    exit_code = 3


class DegenerateBatchError(NestFedError, ValueError):
    category = "degenerate-batch"
    exit_code = 3


class ContractError(NestFedError, ValueError):
    category = "contract"
    exit_code = 3


class ConfigError(NestFedError, ValueError):
    category = "config"
    exit_code = 2


class SpecError(NestFedError, ValueError):
    """A submodel size target cannot be met."""

    category = "spec"
    exit_code = 2

    def __init__(self, message, nearest=None):
        super().__init__(message)
        self.nearest = nearest


class FormatError(NestFedError, ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the problem."""

    category = "format"
    exit_code = 4

    def __init__(self, message, path=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.path = path
        self.offset = offset


class DivergenceError(NestFedError, FloatingPointError):
    category = "divergence"
    exit_code = 5

    def __init__(self, message, round=None, client=None):
        super().__init__(f"{message} (round={round}, client={client})")
        self.round = round
        self.client = client
