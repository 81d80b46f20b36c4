"""Exception types shared across the package."""


class AttrGridError(ValueError):
    pass


class LayoutError(AttrGridError):
    """Attribute vector length or channel span does not match the grid layout."""


class BoundsError(AttrGridError):
    """Coordinate or query point outside the valid domain."""


class EmptyInputError(AttrGridError):
    pass


class FormatError(AttrGridError):
    """Malformed or inconsistent file contents."""
