class SGSASRError(Exception):
    pass


class ConfigError(SGSASRError, ValueError):
    """Invalid or inconsistent configuration (bad dims, missing model file, ...)."""


class InputError(SGSASRError, ValueError):
    """An array argument violates a shape or value contract."""


class DatasetError(SGSASRError):
    pass


class CheckpointError(SGSASRError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class NonFiniteLossError(SGSASRError, FloatingPointError):
    pass
