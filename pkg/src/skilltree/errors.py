class SkillTreeError(Exception):
    pass


class ContractError(SkillTreeError, ValueError):
    """Inputs violate an operation's preconditions."""


class NumericFault(SkillTreeError, ArithmeticError):
    """A NaN or infinity showed up where finite numbers are required."""


class ConfigError(SkillTreeError):
    pass


class CheckpointError(SkillTreeError):
    def __init__(self, message, section=None):
        super().__init__(message if section is None else f"{message} (section {section!r})")
        self.section = section


class EmptyAfterCleaning(SkillTreeError):
    """Data cleaning removed every trajectory; lower the threshold."""
