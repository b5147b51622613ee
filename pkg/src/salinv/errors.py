"""Exception types shared across the package."""


class FormatError(ValueError):
    """Malformed bytes or file contents for one of the documented formats."""


class DegeneratePatternError(ValueError):
    """Pattern estimation has no usable signal (empty regime or ~0 normalizer)."""


class AttackInfeasibleError(ValueError):
    """No pixel survives the gradient floor and clip bound; the shift cannot force anything."""


class EquivalenceError(RuntimeError):
    """The twin construction failed its sanity bound; an audit on it would be meaningless."""
