"""Exception types shared across the package."""


class BFELError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(BFELError, ValueError):
    """Incompatible dimensions, out-of-range hyperparameters, bad config files."""


class InputError(BFELError, ValueError):
    """Malformed or non-finite numerical input."""


class ProtocolViolation(BFELError):
    """A node attempted an action the consensus protocol forbids."""


class FederationHalt(BFELError):
    """The federation cannot continue, e.g. every delegate has been slashed."""


class LedgerError(BFELError):
    """Rejected ledger write: wrong leader, broken link, unauthorized party."""
