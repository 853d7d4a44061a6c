class NstError(Exception):
    """Base class for all errors raised by this package."""
