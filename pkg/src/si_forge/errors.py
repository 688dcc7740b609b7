class DataError(ValueError):
    """Bad or inconsistent input data; maps to CLI exit code 2."""


class ObjectVanishesError(DataError):
    """Requested scale would shrink the object's bounding box below one pixel."""
