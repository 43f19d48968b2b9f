"""Exception hierarchy shared by all modules."""


class PolicyError(Exception):
    """Base class for every error raised by this package."""


class InvalidParameterError(PolicyError, ValueError):
    pass


class InsufficientPointsError(PolicyError, ValueError):
    pass


class PreconditionError(PolicyError, ValueError):
    pass


class DegenerateCorrespondencesError(PolicyError, ValueError):
    pass


class InvalidKeyError(PolicyError, KeyError):
    pass


class UnknownTaskError(PolicyError, KeyError):
    """A stage key required for inference is absent from the demo store."""

    def __init__(self, key: str):
        super().__init__(key)
        self.key = key

    def __str__(self):
        return f"no demonstrations stored under key {self.key!r}"


class NoCandidatesError(PolicyError, ValueError):
    pass


class PlyFormatError(PolicyError, ValueError):
    pass


class LowConfidenceError(PolicyError):
    """Selected registrations scored below the fitness threshold.

    Attributes:
        stage: key of the first offending stage.
        scores: ``(s_a, s_b)`` of that stage's selected pair.
        action: the full inference result, kept for reporting.
    """

    def __init__(self, stage, scores, threshold, action=None):
        self.stage = stage
        self.scores = tuple(scores)
        self.threshold = threshold
        self.action = action
        avg = sum(self.scores) / 2.0
        super().__init__(
            f"stage {stage!r}: average fitness {avg:.3f} below threshold {threshold:.3f} "
            f"(s_a={self.scores[0]:.3f}, s_b={self.scores[1]:.3f})"
        )
