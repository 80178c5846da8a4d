"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures
to the documented process exit status (2 config, 3 backend, 4 validation).
"""


class ProxyWorldError(Exception):
    exit_code = 1


# geometry / panorama
class ZeroVector(ProxyWorldError, ValueError):
    pass


class DegenerateMesh(ProxyWorldError, ValueError):
    exit_code = 4


class BadTiling(ProxyWorldError, ValueError):
    pass


class CoverageGap(ProxyWorldError, ValueError):
    pass


class VertexAtOrigin(ProxyWorldError, ValueError):
    pass


class MissingTags(ProxyWorldError, ValueError):
    pass


class EmptyLibrary(ProxyWorldError, ValueError):
    pass


# depth adaptation
class DegenerateQuery(ProxyWorldError, ValueError):
    pass


class RankDeficient(ProxyWorldError, ValueError):
    pass


# generative backends
class BackendError(ProxyWorldError):
    exit_code = 3


class BackendUnavailable(BackendError):
    pass


class BackendMalformedReply(BackendError):
    pass


class MissingAlpha(BackendError):
    pass


class DimMismatch(ProxyWorldError, ValueError):
    pass


# agents / placement
class AgentUnavailable(ProxyWorldError):
    exit_code = 3


class AgentInvalidLabel(ProxyWorldError, ValueError):
    pass


class PlacementRejected(ProxyWorldError):
    """Raised by back-projection; ``reason`` is the short status tag."""

    reason = "Rejected"


class NoHit(PlacementRejected):
    reason = "NoHit"


class MaskedRegion(PlacementRejected):
    reason = "MaskedRegion"


class WaterHit(PlacementRejected):
    reason = "WaterHit"


class TemplateMissing(ProxyWorldError, ValueError):
    pass


# immersion
class ClipTooShort(ProxyWorldError, ValueError):
    pass


class SampleRateMismatch(ProxyWorldError, ValueError):
    pass


# export / orchestration
class UnassembledScene(ProxyWorldError):
    exit_code = 4


class ValidationFailed(ProxyWorldError):
    exit_code = 4

    def __init__(self, items):
        self.items = list(items)
        super().__init__("; ".join(self.items))


class ConfigInvalid(ProxyWorldError):
    exit_code = 2

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))


class StageFailed(ProxyWorldError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"stage {stage} failed: {cause}")
