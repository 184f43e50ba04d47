"""Exception hierarchy shared by every fedselect module."""


class FedSelectError(Exception):
    """Base class for all errors raised by fedselect."""


class PlacementError(FedSelectError, TypeError):
    """A federated value has the wrong placement for the operation."""


class EmptyCohort(FedSelectError, ValueError):
    pass


class ShapeMismatch(FedSelectError, ValueError):
    pass


class KeyOutOfRange(FedSelectError, IndexError):
    """A select key is outside ``[0, K)``.

    ``client`` and ``position`` locate the offending key when known.
    """

    def __init__(self, key, K, client=None, position=None):
        self.key = key
        self.K = K
        self.client = client
        self.position = position
        where = ""
        if client is not None:
            where = f" (client {client}, position {position})"
        super().__init__(f"key {key} outside [0, {K}){where}")


class BlockCollision(FedSelectError, ValueError):
    pass


class KeyspaceOverflow(FedSelectError, OverflowError):
    pass


class TooManyKeys(FedSelectError, ValueError):
    pass


class BadAlpha(FedSelectError, ValueError):
    pass


class FeatureNotInSlice(FedSelectError, ValueError):
    pass


class EmptyDataset(FedSelectError, ValueError):
    pass


class CohortTooLarge(FedSelectError, ValueError):
    pass


class BadConfig(FedSelectError, ValueError):
    pass


class ParseError(FedSelectError, ValueError):
    def __init__(self, file, line, message):
        self.file = file
        self.line = line
        super().__init__(f"{file}:{line}: {message}")


class UnknownKey(BadConfig):
    def __init__(self, path):
        self.path = path
        super().__init__(f"unknown config key: {path}")


class ConfigConflict(BadConfig):
    pass
