"""Exception types shared across the package."""


class XlmdpError(Exception):
    """Base class for all package errors."""


class InvalidDiscountError(XlmdpError, ValueError):
    pass


class InvalidPolicyError(XlmdpError, ValueError):
    pass


class ModelContractError(XlmdpError):
    """A model component produced a value outside its declared contract
    (a QoS triple out of range, a non-stochastic row, a broken
    dominance-preservation property, ...)."""


class EmptyCandidateError(XlmdpError, ValueError):
    pass


class ConfigError(XlmdpError, ValueError):
    """Invalid or unknown configuration field. ``field`` names the offender."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class PolicyCoverageError(XlmdpError, KeyError):
    pass


class DivergedRunError(XlmdpError):
    def __init__(self, stage, message="non-finite value encountered"):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


class ArchitectureViolation(XlmdpError, AssertionError):
    """A layer tried to read state that belongs to another layer."""
