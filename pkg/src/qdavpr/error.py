class QdaVPRError(Exception):
    """Basic QdaVPR error definition."""


class ConfigError(QdaVPRError):
    """Raised if a configuration value violates its constraints."""


class PathError(QdaVPRError):
    """Raised if a file path has an unsupported suffix or does not exist."""


class ParsingError(QdaVPRError):
    """Raised if a config, manifest or binary container can not be decoded."""


class InputShapeError(QdaVPRError):
    """Raised if an image or feature batch has an unexpected shape."""


class DimensionError(QdaVPRError):
    """Raised if the channel dimension of two operands disagree."""


class SpatialSizeError(QdaVPRError):
    """Raised if a feature map is too small for the domain feature extractor."""


class DomainError(QdaVPRError):
    """Raised for synthetic domain ids outside of ``0..5``."""


class SamplingError(QdaVPRError):
    """Raised if a manifest can not provide the requested batch composition."""


class ProtocolError(QdaVPRError):
    """Raised if the evaluation protocol does not match the available metadata."""


class IndexBoundError(QdaVPRError):
    ...


class NonFiniteLossError(QdaVPRError):
    """Raised if a training step produced a NaN or infinite loss."""
