"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class HyperGaleError(Exception):
    exit_code = 1


class ConfigError(HyperGaleError):
    """Bad configuration, flag, or parameter value."""

    exit_code = 1


class ParameterError(ConfigError, ValueError):
    pass


class DimensionError(ConfigError, ValueError):
    pass


class ContractError(HyperGaleError, RuntimeError):
    pass


class DataError(HyperGaleError):
    exit_code = 2


class ValidationError(DataError, ValueError):
    pass


class FormatError(DataError):
    def __init__(self, message: str, path=None, offset: int | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
        self.path = path
        self.offset = offset


class DegenerateSignalError(DataError, ValueError):
    def __init__(self, roi: int):
        super().__init__(f"ROI {roi} has a constant time series (zero variance)")
        self.roi = roi


class SplitError(DataError, ValueError):
    pass


class SpecError(ConfigError, ValueError):
    pass


class NumericalError(HyperGaleError):
    exit_code = 3


class TrainingDivergedError(NumericalError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


class OracleError(NumericalError):
    pass
