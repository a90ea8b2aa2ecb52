"""Exception types shared across the package."""


class FlexRagError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FlexRagError):
    """An array argument has an incompatible shape."""


class ContextOverflow(FlexRagError):
    """Prefix rows plus tokens exceed the model window."""


class EmptyLossSupport(FlexRagError):
    """Every position was masked out of the loss."""


class NoGraph(FlexRagError):
    """backward() called without a recorded forward cache."""


class InvalidArgument(FlexRagError):
    """A scalar argument is out of its valid range."""


class NonFiniteGradient(FlexRagError):
    """A gradient contains NaN or infinity."""


class EmptyContext(FlexRagError):
    """An operation received an empty token sequence or sentence list."""


class IoError(FlexRagError):
    """A store or index path could not be read or written."""


class StaleEntry(FlexRagError):
    """A stored embedding's content hash no longer matches its document."""


class BudgetTooSmall(FlexRagError):
    """The compression budget cannot cover one unit per priority group."""


class InfeasibleAllocation(FlexRagError):
    """No keep fraction in (0, 1] satisfies the budget constraint."""


class InvalidConfig(FlexRagError):
    """A configuration value violates its contract."""


class InvalidSample(FlexRagError):
    """A dataset record is malformed (e.g. no gold answers)."""


class EmptyCorpus(FlexRagError):
    """Index construction over zero documents."""


class DuplicateId(FlexRagError):
    """Two corpus documents share a doc_id."""


class CheckpointError(FlexRagError):
    """A checkpoint file is corrupt or has an unsupported version."""
