# ===== app/errors.py =====
"""Exception hierarchy shared by services and commands.

Every error carries the exit code the command line returns for it:
2 for configuration problems, 3 for malformed data files and 4 for
numerical failures.
"""


class MoSimError(Exception):
    exit_code = 1


class ConfigError(MoSimError):
    exit_code = 2


class DimensionError(ConfigError, ValueError):
    """Shape mismatch; ``layer`` names the offending layer index when known."""

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f'{message} (layer {layer})'
        super().__init__(message)
        self.layer = layer


class DataFormatError(MoSimError):
    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f'{message} at byte offset {offset}'
        super().__init__(message)
        self.offset = offset


class NumericalError(MoSimError):
    exit_code = 4


class IntegrationError(NumericalError):
    """Raised by the solvers; keeps the last accepted time and state."""

    def __init__(self, message, t=None, state=None):
        super().__init__(message)
        self.t = t
        self.state = state


class TrainingFault(NumericalError):
    def __init__(self, message, segment=None):
        if segment is not None:
            message = f'{message} (segment {segment})'
        super().__init__(message)
        self.segment = segment


class DensityFault(NumericalError):
    pass
