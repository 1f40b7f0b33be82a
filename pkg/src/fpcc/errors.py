"""Exception hierarchy shared by every stage of the codec."""


class FpccError(Exception):
    """Base class for all library errors."""


class ShapeError(FpccError, ValueError):
    pass


class ConfigError(FpccError, ValueError):
    pass


class InvariantError(FpccError, ValueError):
    pass


class EmptyInputError(FpccError, ValueError):
    pass


class DegenerateInputError(FpccError, ValueError):
    pass


class AlignmentError(FpccError, ValueError):
    """Two sparse tensors were expected to share an active set and do not."""


class DecodeError(FpccError):
    """A bitstream or frame could not be parsed."""


class SeedError(FpccError):
    """Randomized construction failed for the given seed."""


class GenerationError(FpccError):
    pass


class TrainingError(FpccError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
