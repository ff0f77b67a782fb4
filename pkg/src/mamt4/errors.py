"""Exception types shared across the package."""


class InvalidShape(ValueError):
    """A shape argument is malformed or an array has the wrong dimensions."""


class ShapeMismatch(ValueError):
    """Two operands have incompatible shapes."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of the operation."""


class InvalidAxis(ValueError):
    """An axis index is out of range for the operand."""


class NotScalar(ValueError):
    """backward() was asked to start from a non-scalar tensor."""


class InvalidConfig(ValueError):
    """A configuration violates its constraints."""


class MissingGradient(RuntimeError):
    """A trainable parameter has no gradient at optimizer-step time."""


class MissingView(RuntimeError):
    """An exam view is absent and black-image substitution is disabled."""


class IncompatibleCheckpoint(RuntimeError):
    """Checkpoint entries do not match the target model state."""


class CorruptCheckpoint(RuntimeError):
    """Checkpoint bytes fail structural or CRC validation."""


class EmptyMask(ValueError):
    """A mask with no set pixels where at least one is required."""


class InvalidLabel(ValueError):
    """A label value outside the allowed set."""


class InvalidCounts(ValueError):
    """Class counts that make a derived quantity undefined."""


class UndefinedMetric(ValueError):
    """A metric is undefined for the given inputs (e.g. single-class ROC)."""


class ParseError(ValueError):
    """A text input (manifest, config) failed to parse."""


class DuplicateView(ValueError):
    """The same (study, laterality, projection) appears twice."""


class EmptyDataset(ValueError):
    """A dataset with zero usable samples."""
