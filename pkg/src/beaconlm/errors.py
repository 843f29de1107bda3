"""Exception taxonomy shared across the package."""


class BeaconError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(BeaconError):
    """Operand shapes are incompatible."""


class ConfigError(BeaconError):
    """A configuration value is invalid or inconsistent."""


class DataError(BeaconError):
    """Input data is malformed (bad token id, bad label, bad file)."""


class UsageError(BeaconError):
    """An API was called in a way its contract forbids."""


class StateError(BeaconError):
    """Mutable state is inconsistent with the requested operation."""


class NumericError(BeaconError):
    """A numeric quantity became non-finite or otherwise degenerate."""


class DegenerateRowError(NumericError):
    """A softmax row had every entry masked."""
