"""Exception types raised across the pipeline."""


class ToonSynthError(Exception):
    """Base class for all pipeline errors."""


class ZeroSupport(ToonSynthError):
    """No pixel passed the saturation/value gate; the frame is not a chroma-key frame."""


class EmptyForeground(ToonSynthError):
    """Keying removed every pixel of the frame."""


class InsufficientGuides(ToonSynthError):
    """Fewer guide boxes than assets to place."""


class NoFeasiblePosition(ToonSynthError):
    """Exhaustive grid scan found no admissible position."""


class MissingAsset(ToonSynthError, KeyError):
    """A layout references an asset or background id absent from the pools."""

    def __str__(self) -> str:
        return Exception.__str__(self)


class RleError(ToonSynthError, ValueError):
    """Run lengths do not sum to the mask size."""


class GuideBundleError(ToonSynthError, ValueError):
    """Guide-box bundle does not match the expected schema."""
