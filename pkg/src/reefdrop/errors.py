"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so the CLI can emit a
single parseable line.
"""


class ReefDropError(Exception):
    code = "error"


class ValidationError(ReefDropError, ValueError):
    code = "invalid"


class ManifestError(ValidationError):
    code = "manifest"


class GridError(ValidationError):
    code = "grid"


class BackendError(ReefDropError):
    code = "backend"


class DimensionError(ValidationError):
    code = "dimension"


class DecisionError(ValidationError):
    code = "decision"


class ZeroProbabilityError(ValidationError):
    """A true-class probability of exactly zero makes the focal loss infinite."""

    code = "zero_probability"


class DivergenceError(ReefDropError):
    code = "divergence"

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class CheckpointError(ReefDropError):
    code = "checkpoint"


class ParseError(ReefDropError):
    """No ``{"class": k, "conf": c}`` object could be found in a response."""

    code = "unparseable"


class ClassRangeError(ParseError):
    code = "class_out_of_range"


class TransportError(ReefDropError):
    code = "transport"


class AlignmentError(ValidationError):
    code = "alignment"


class GeoError(ValidationError):
    code = "geo"
