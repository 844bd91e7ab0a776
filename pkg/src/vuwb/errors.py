"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class VuwbError(Exception):
    exit_code = 1


class GeometryError(VuwbError, ValueError):
    """A measurement function is undefined at the given configuration."""


class BehindCameraError(GeometryError):
    pass


class DegenerateRangeError(GeometryError):
    pass


class ConfigError(VuwbError, ValueError):
    exit_code = 3


class DatasetError(VuwbError):
    exit_code = 4


class MapFormatError(DatasetError):
    exit_code = 5


class PipelineError(VuwbError):
    exit_code = 6


class GaugeError(PipelineError):
    """Problem has no fixed variable and was not declared gauge-free."""


class InitializationError(PipelineError):
    pass


class UnderConstrainedError(PipelineError):
    pass


class TrackingLostError(PipelineError):
    pass


class DivergenceError(PipelineError):
    pass


class DisconnectedGraphError(PipelineError):
    pass


class InsufficientAnchorsError(PipelineError):
    pass


class DegenerateGeometryError(PipelineError):
    pass


class EvaluationError(VuwbError):
    exit_code = 7


class NoOverlapError(EvaluationError):
    pass


class InsufficientPairsError(EvaluationError):
    pass


class CollinearError(EvaluationError):
    pass


class AnchorMismatchError(EvaluationError):
    pass
