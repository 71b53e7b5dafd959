"""Exception types shared across the package."""


class ShapeMismatch(ValueError):
    """Operands (or file contents) have incompatible shapes."""


class NotScalar(ValueError):
    """backward() was called on a tensor that is not a scalar."""


class TapeConsumed(RuntimeError):
    """A tape can only be walked backward once."""


class AllZeroInput(ValueError):
    """st_argmax needs at least one strictly positive entry."""


class EmptyOpenList(RuntimeError):
    """Node selection was asked for but no node is open."""


class Unreachable(RuntimeError):
    """No path from start to goal exists."""


class StepLimitExceeded(RuntimeError):
    """Search exceeded its step budget without reaching the goal."""


class EmptyPath(ValueError):
    """A path metric was asked for on an empty point set."""


class EmptyBand(RuntimeError):
    """A cost-percentile band contains no candidate start cells."""


class NoValidGoal(RuntimeError):
    """No usable goal cell was found after the retry budget."""
