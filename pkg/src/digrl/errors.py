"""Exception taxonomy shared across the package."""


class DigrlError(Exception):
    """Base class for all package-specific errors."""


class SizeError(DigrlError, ValueError):
    """An input collection has the wrong number of elements."""


class ShapeError(DigrlError, ValueError):
    """An array argument has the wrong shape or a non-scalar was given."""


class TopologyError(DigrlError, ValueError):
    """A mesh is not watertight or otherwise structurally broken."""


class DegenerateGeometryError(DigrlError, ValueError):
    """Geometry collapsed to lower dimension (coplanar hull input, zero volume)."""


class PlacementError(DigrlError, RuntimeError):
    """An object could not be placed into the tray within the retry budget."""


class PlannerError(DigrlError, RuntimeError):
    """A baseline planner has no admissible target."""


class ProtocolError(DigrlError, RuntimeError):
    """An API was driven out of order (e.g. stepping a finished episode)."""


class EmptyObservationError(DigrlError, RuntimeError):
    """Sensor crop produced zero points."""


class ConfigError(DigrlError, ValueError):
    """A config file or profile override is malformed."""
