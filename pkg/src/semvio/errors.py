"""Exception types shared across the estimator."""


class SemvioError(Exception):
    """Base class for all estimator errors."""


class NonPositiveDepth(SemvioError):
    """A point to be projected lies at or behind the camera plane."""


class NonPositiveSemiAxis(SemvioError):
    """An ellipsoid semi-axis is not strictly positive."""


class DegeneratePlane(SemvioError):
    """A back-projected plane has a (near-)zero normal."""


class InsufficientParallax(SemvioError):
    """Triangulation views have too little baseline to fix a point."""


class InsufficientObservations(SemvioError):
    """Not enough measurements to initialize an object state."""


class DegenerateConfiguration(SemvioError):
    """Point set is (near-)collinear; rigid alignment is ambiguous."""


class RankDeficient(SemvioError):
    """Ellipsoid least-squares system does not isolate a unique solution."""


class ShapeCollapsed(SemvioError):
    """Optimized semi-axes fell below the minimum allowed size."""


class CovarianceNotPSD(SemvioError):
    """Filter covariance lost positive semidefiniteness."""


class NoNullspace(SemvioError):
    """Residual stack has no rows left after nuisance elimination."""


class FrameOutOfWindow(SemvioError):
    """Observation refers to a frame no longer in the sliding window."""


class NonMonotonicTimestamp(SemvioError):
    """Measurement stream violates strict timestamp ordering."""


class InnovationGateFailed(SemvioError):
    """Optional chi-square gate rejected a stacked update."""


class ObjectBehindCamera(SemvioError):
    """Object center projects behind the camera; omit it this frame."""


class ConfigError(SemvioError):
    """Configuration document failed schema validation."""


class FormatError(SemvioError):
    """Dataset file has an unknown version or malformed record."""
