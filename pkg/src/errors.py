"""Exception hierarchy shared by every sub-package."""


class PaQError(Exception):
    """Base class for all errors raised by this project."""


class ShapeError(PaQError, ValueError):
    """Operand shapes do not conform for a tensor operation."""


class GraphError(PaQError, RuntimeError):
    """Invalid use of the compute graph (non-scalar loss, double backward, ...)."""


class ConfigError(PaQError, ValueError):
    """A configuration value violates a module invariant."""


class MatchingError(PaQError, ValueError):
    """The assignment problem is not solvable as posed."""


class AnnotationFormatError(PaQError, ValueError):
    """An annotation file is malformed. The message names the offending location."""


class ImageFormatError(PaQError, ValueError):
    """An image file is not a well-formed 8-bit binary PPM."""


class CheckpointError(PaQError, ValueError):
    """A checkpoint file is corrupt or does not fit the requested model."""


class DatasetError(PaQError, ValueError):
    """A dataset directory is missing or empty."""


class EvaluationError(PaQError, ValueError):
    """Evaluation inputs are inconsistent (e.g. no ground truth at all)."""


class TrainingDivergedError(PaQError, RuntimeError):
    """The training loss became non-finite."""


class GradientCheckError(PaQError, RuntimeError):
    """Analytic and numeric gradients disagree beyond tolerance."""


class ReportError(PaQError, ValueError):
    """A run directory lacks the files a report needs."""
