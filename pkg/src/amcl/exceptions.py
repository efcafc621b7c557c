class AMCLError(Exception):
    """Base class for errors raised by this package."""


class ContractViolation(AMCLError, ValueError):
    """An argument broke a documented shape or value contract."""


class DatasetError(AMCLError):
    pass


class CheckpointError(AMCLError):
    pass


class ModeCollapseError(AMCLError):
    pass


class NonFiniteGradientError(AMCLError, FloatingPointError):
    pass
