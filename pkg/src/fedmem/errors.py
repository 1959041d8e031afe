"""Exception hierarchy shared by every fedmem module."""


class FedMemError(Exception):
    """Base class for all fedmem errors."""


class ConfigurationError(FedMemError, ValueError):
    """Invalid construction parameters or experiment configuration."""


class InputError(FedMemError, ValueError):
    """Invalid runtime input (bad shapes, empty batches, off-simplex vectors)."""


class DegenerateClientError(ConfigurationError):
    """A client ended up with too few samples to be split."""


class EmptyStoreError(FedMemError):
    """A nearest-neighbor query was issued against an empty datastore."""


class EmptyNeighborhoodError(InputError):
    """A label posterior was requested from zero neighbors."""


class FormatError(FedMemError, ValueError):
    """A binary blob failed magic/version/length validation."""
