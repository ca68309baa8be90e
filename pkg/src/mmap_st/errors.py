"""Exception hierarchy shared by every pipeline stage."""


class MMAPError(Exception):
    """Base class for domain errors (CLI exits with status 1)."""


class ConfigError(MMAPError, ValueError):
    pass


class DatasetLayoutError(MMAPError, FileNotFoundError):
    pass


class AlignmentError(MMAPError):
    pass


class ParseError(MMAPError, ValueError):
    pass


class DomainError(MMAPError, ValueError):
    pass


class BoundaryError(MMAPError, IndexError):
    pass


class ShapeError(MMAPError, ValueError):
    pass


class DivergenceError(MMAPError, FloatingPointError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class CheckpointError(MMAPError):
    pass
