"""Exception taxonomy shared across the package."""


class SpotGroundError(Exception):
    """Base class for all spotground errors."""


class FormatError(SpotGroundError, ValueError):
    """Byte stream does not look like the expected file format."""


class UnsupportedLayoutError(SpotGroundError, ValueError):
    """File is well-formed but uses a dtype/order/shape we do not support."""


class TruncationError(SpotGroundError, ValueError):
    """Payload is shorter or longer than the header declares."""


class ParseError(SpotGroundError, ValueError):
    """Text/JSON input does not match the expected schema."""


class DomainError(SpotGroundError, ValueError):
    """A parsed value is syntactically fine but outside its legal domain."""


class VocabularyError(SpotGroundError, ValueError):
    """A label is not part of the configured class vocabulary."""


class IdentityError(SpotGroundError, ValueError):
    """Inputs that must describe the same game half do not."""


class AlignmentError(SpotGroundError, ValueError):
    """Per-source sequence lengths differ beyond the allowed slack."""


class ShapeError(SpotGroundError, ValueError):
    """Array shape is inconsistent with the configuration."""


class NumericError(SpotGroundError, ArithmeticError):
    """A non-finite value appeared where finite math was required."""


class ConsistencyError(SpotGroundError, RuntimeError):
    """A cached forward record does not match the requested backward pass."""


class PlacementError(SpotGroundError, ValueError):
    """Synthetic events/replays cannot be placed under the configured constraints."""
