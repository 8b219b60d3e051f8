"""
Exception hierarchy for noise-adapt.

Every error derives from ``NoiseAdaptError`` and from the closest builtin, so
callers may catch either one.
"""


class NoiseAdaptError(Exception):
    pass


class InvalidInputError(NoiseAdaptError, ValueError):
    pass


class ShapeError(NoiseAdaptError, ValueError):
    pass


class PhaseRequiredError(NoiseAdaptError, ValueError):
    pass


class EmptyCorpusError(NoiseAdaptError, ValueError):
    pass


class DuplicateIdError(NoiseAdaptError, ValueError):
    pass


class InsufficientUtterancesError(NoiseAdaptError, ValueError):
    def __init__(self, msg, noise_type=None):
        super().__init__(msg)
        self.noise_type = noise_type


class ConfigurationError(NoiseAdaptError, ValueError):
    pass


class TrainingDivergenceError(NoiseAdaptError, FloatingPointError):
    def __init__(self, component, step=None, value=None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"Loss component '{component}' is not finite{where}: {value}")
        self.component = component
        self.step = step
        self.value = value


class BundleVersionError(NoiseAdaptError, RuntimeError):
    pass


class BundleCorruptError(NoiseAdaptError, OSError):
    pass


class SilhouetteUndefinedError(NoiseAdaptError, ValueError):
    pass


class OutputCollisionError(NoiseAdaptError, FileExistsError):
    pass
