"""Exception types shared across the toolkit."""


class LqsidError(Exception):
    """Base class for toolkit-specific failures."""


class SolverError(LqsidError):
    """Gain synthesis failed: ill-posed problem or singular inner matrix."""


class DivergenceError(LqsidError):
    """A recursion or rollout produced non-finite values."""


class VafUndefinedError(LqsidError):
    """VAF denominator vanishes: the measured sequence is constant."""


class SearchError(LqsidError):
    """Grid search could not evaluate any candidate point."""


class ConfigError(LqsidError):
    """Invalid configuration or incompatible inputs."""
