"""Exception hierarchy for the toolkit."""


class FlowCorrError(Exception):
    """Base class for all toolkit errors."""


class EmptyFlow(FlowCorrError):
    """A flow has fewer than 2 packets after construction or merging."""


class DegenerateData(FlowCorrError):
    """A sample carries no usable spread (e.g. MAD of zero)."""


class NonPositiveData(FlowCorrError):
    """A positive-support fit was asked for data containing values <= 0."""


class ConvergenceFailure(FlowCorrError):
    """An iterative fit did not reach its gradient tolerance."""


class SupportMismatch(FlowCorrError):
    """KLD is undefined: the first histogram has mass where the second has none."""


class LengthMismatch(FlowCorrError):
    """Paired sequences have incompatible lengths."""


class InvalidSupport(FlowCorrError):
    """An observed IPD lies below the model's lower support bound."""


class UnsupportedJitterFamily(FlowCorrError):
    """The requested detector variant has no closed form for this jitter family."""


class EmptyGrid(FlowCorrError):
    """A search grid contains no candidate points."""


class NegativeDelay(FlowCorrError):
    """A delay trace produced a negative delay sample."""


class DegenerateScores(FlowCorrError):
    """Score sets cannot produce a ROC (all identical or one side empty)."""


class UnmeasurableTarget(FlowCorrError):
    """The requested false-positive target is below Monte-Carlo resolution."""


class ParseError(FlowCorrError):
    """A text input file violates its format."""

    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class MonotonicityError(ParseError):
    """A timestamp file is not strictly increasing."""

    def __init__(self, line: int, reason: str = "timestamps must be strictly increasing"):
        super().__init__(line, reason)
