"""Exception types shared across the engine."""


class FlowKVError(Exception):
    """Base class for all engine errors."""


class OrderViolation(FlowKVError):
    """A segment was appended out of the system/query/response sequence."""


class ShapeMismatch(FlowKVError):
    """Array dimensions disagree with the pool or observation layout."""


class EmptySelection(FlowKVError):
    """A compression left no survivors for a segment or the whole range."""


class RangeNotContiguous(FlowKVError):
    """compress_segments was given a non-contiguous segment range."""


class BudgetTooSmall(FlowKVError):
    """A keep budget below one token was requested."""


class BudgetExhausted(FlowKVError):
    """The preserved cache already exceeds the global target minus the min-keep floor."""


class NonPSDCovariance(FlowKVError):
    """Query covariance is asymmetric or not positive semi-definite."""


class SeqOverflow(FlowKVError):
    """Decoder context would exceed the configured maximum sequence length."""


class ConfigError(FlowKVError):
    """Invalid model, policy, or harness configuration."""


class InvariantViolation(FlowKVError):
    """Input data violates a documented invariant (e.g. strict pass without loose pass)."""


class EmptyInput(FlowKVError):
    """An aggregate was requested over an empty collection."""
