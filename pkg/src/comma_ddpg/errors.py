class ConfigError(ValueError):
    """A configuration violates one of its invariants."""


class SignalTimingError(ValueError):
    """Green duration out of range, or set outside a cycle boundary."""


class CheckpointError(IOError):
    """Checkpoint file is corrupt, truncated or of an unknown version."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf."""


class InsufficientDataError(RuntimeError):
    """Replay buffer holds fewer transitions than the minibatch size."""
