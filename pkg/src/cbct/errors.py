"""Exception types shared across the toolkit."""


class CbctError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(CbctError):
    """Array dimensions inconsistent with the geometry or with each other."""


class RangeError(CbctError):
    """Index or window outside the valid range."""


class EmptyScan(CbctError):
    """A view-angle list with no views was requested."""


class NotShortScan(CbctError):
    """Operation requires a short-scan geometry."""


class ParamError(CbctError):
    """Invalid numeric parameter (negative sigma, empty grid, ...)."""


class SpecError(CbctError):
    """Invalid phantom specification."""


class DataError(CbctError):
    """Invalid or empty dataset."""


class MetricUndefined(CbctError):
    """Metric has no defined value for this input (e.g. zero reference)."""


class DegenerateHistogram(CbctError):
    """Histogram carries no information (constant volume)."""


class FormatError(CbctError):
    """Malformed file header or payload."""


class NumericError(CbctError):
    """A non-finite value was produced where finite data is required."""
