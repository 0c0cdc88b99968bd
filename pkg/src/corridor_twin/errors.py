"""Exception types shared across the package."""


class CorridorError(Exception):
    """Base class for all package errors."""


class ConfigError(CorridorError, ValueError):
    """A scenario or component configuration is invalid."""


class CollisionStateError(CorridorError):
    """A car-following query was made with a non-positive gap."""


class InvalidDuration(CorridorError, ValueError):
    pass


class PlacementError(CorridorError, ValueError):
    """Station spacing outside the supported range."""


class NoForecastError(CorridorError):
    """A speed plan was requested without any signal forecast."""


class LocalizationDegraded(CorridorError):
    """Too few landmarks were observed to fix a pose."""


class InsufficientData(CorridorError):
    """Not enough recorded events to calibrate a model."""
