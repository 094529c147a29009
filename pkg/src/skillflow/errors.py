"""Exception hierarchy shared across the package."""


class SkillFlowError(Exception):
    """Base class for every error raised by skillflow."""


class NonPositiveDepth(SkillFlowError, ValueError):
    pass


class LogNearPi(SkillFlowError, ValueError):
    """Rotation angle too close to pi for a stable logarithm; re-seed the caller."""


class InvalidTransform(SkillFlowError, ValueError):
    pass


class NumericalBreakdown(SkillFlowError, ArithmeticError):
    """Normal equations became non-finite (usually a degenerate Jacobian)."""


class DegenerateGeometry(SkillFlowError, ValueError):
    pass


class EmptySkill(SkillFlowError, ValueError):
    pass


class UnknownSkill(SkillFlowError, KeyError):
    pass


class BadStep(SkillFlowError, ValueError):
    pass


class ZeroVector(SkillFlowError, ValueError):
    pass


class NonFiniteLoss(SkillFlowError, ArithmeticError):
    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class ObjectBehindCamera(SkillFlowError, ValueError):
    pass
