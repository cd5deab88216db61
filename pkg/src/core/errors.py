EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class RCAlignError(Exception):
    exit_code = EXIT_USAGE


class ConfigError(RCAlignError):
    pass


class UsageError(RCAlignError):
    pass


class DimensionError(RCAlignError):
    pass


class SymbolIndexError(RCAlignError, IndexError):
    pass


class DurationValueError(RCAlignError, ValueError):
    pass


class CapabilityError(RCAlignError):
    pass


class StateCorruptionError(RCAlignError):
    exit_code = EXIT_NUMERIC


class DataError(RCAlignError):
    exit_code = EXIT_DATA


class CheckpointError(DataError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    def __init__(self, name: str, expected=None, found=None):
        self.tensor_name = name
        if found is None:
            message = f"Missing tensor '{name}' (expected shape {list(expected)})"
        elif expected is None:
            message = f"Unexpected tensor '{name}' with shape {list(found)}"
        else:
            message = f"Tensor '{name}' has shape {list(found)}, expected {list(expected)}"
        super().__init__(message)


class NumericAbortError(RCAlignError):
    exit_code = EXIT_NUMERIC

    def __init__(self, step: int, tensor_name: str):
        self.step = step
        self.tensor_name = tensor_name
        super().__init__(f"Non-finite loss at step {step}; first non-finite tensor: {tensor_name}")
