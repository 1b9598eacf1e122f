"""Exception hierarchy shared by every module."""


class SubpipeError(Exception):
    pass


class ShapeError(SubpipeError, ValueError):
    pass


class DegenerateBasisError(SubpipeError, ArithmeticError):
    pass


class UndefinedError(SubpipeError, ValueError):
    """Quantity undefined for the given input (e.g. stable rank of a zero matrix)."""


class StaleSubspaceError(SubpipeError):
    def __init__(self, frame_version, local_version):
        super().__init__(
            f"frame carries subspace v{frame_version}, local snapshot is v{local_version}"
        )
        self.frame_version = frame_version
        self.local_version = local_version


class NumericFaultError(SubpipeError, FloatingPointError):
    def __init__(self, layer_id, what="activation"):
        super().__init__(f"non-finite {what} in layer {layer_id}")
        self.layer_id = layer_id


class ProtocolError(SubpipeError):
    pass


class InvalidTokenError(SubpipeError, ValueError):
    pass


class RangeError(SubpipeError, ValueError):
    pass


class ConfigError(SubpipeError, ValueError):
    pass


class StageFailure(SubpipeError):
    def __init__(self, stage_id, cause):
        super().__init__(f"stage {stage_id} failed: {cause}")
        self.stage_id = stage_id
        self.cause = cause
