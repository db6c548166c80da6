"""Exception types shared across the local mapping engine."""


class LocalMapError(Exception):
    """Base class for all engine errors."""


class DegenerateGeometryError(LocalMapError):
    """Geometry too ill-conditioned to solve (zero baseline, coincident rays, ...)."""


class InvalidArgumentError(LocalMapError):
    """Caller passed something the operation contract forbids."""


class InvalidStateError(LocalMapError):
    """Operation applied to an entity in the wrong lifecycle state."""


class SlotConflictError(InvalidStateError):
    """A keypoint slot is already bound to another map point."""


class StoreCapacityError(InvalidStateError):
    """Device keyframe store is full (pre-allocated capacity exceeded)."""


class WindowTooSmallError(LocalMapError):
    """Not enough keyframes to build a bundle adjustment window."""


class InsufficientDataError(LocalMapError):
    """Too few samples for the requested evaluation."""


class GenerationFailedError(LocalMapError):
    """Synthetic sequence generation could not satisfy its constraints."""
