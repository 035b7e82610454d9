"""Exception types shared across the package."""


class AdaptlabError(Exception):
    """Base class for all package errors."""


class FormatError(AdaptlabError, ValueError):
    """A binary file does not conform to its declared layout."""


class EmptyDatasetError(AdaptlabError, ValueError):
    pass


class ShapeError(AdaptlabError, ValueError):
    pass


class InvariantError(AdaptlabError, ValueError):
    """A domain object was constructed with values violating its invariants."""


class ConfigError(AdaptlabError, ValueError):
    pass
