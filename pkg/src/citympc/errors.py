"""Exception hierarchy shared across the toolkit."""


class CityMpcError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CityMpcError):
    """Invalid configuration or precondition violation."""


class DegenerateLinkError(CityMpcError):
    """A link that should have been filtered upstream (zero power, no paths)."""


class DataFormatError(CityMpcError):
    """Corrupt or incompatible serialized artifact."""


class BadMagicError(DataFormatError):
    """File does not start with the expected magic bytes."""


class VersionError(DataFormatError):
    """File format version is not supported."""


class TruncatedFileError(DataFormatError):
    """File ended before the declared payload was read."""


class IncompatibleFileError(DataFormatError):
    """File is well-formed but incompatible with the requested use (e.g. different L)."""


class DivergedRunError(CityMpcError):
    """Checkpoint failed the uncertainty-weighting divergence filter."""
