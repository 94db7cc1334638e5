"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(ValueError):
    """A hyperparameter or argument is outside its admissible range."""


class DegenerateInputError(ValueError):
    """Numerically degenerate input, e.g. a near-zero row fed to a normalizer."""


class TapeError(RuntimeError):
    """Autodiff tape misuse: double backward, stale tensors, loss not recorded."""


class StateError(RuntimeError):
    """An object is in the wrong state for the requested operation."""


class ValidationError(ValueError):
    """Dataset or label contents violate a documented invariant."""


class DataFormatError(ValueError):
    """A data file does not conform to the documented text format."""


class ConfigError(ValueError):
    """Bad configuration file or unknown configuration key."""


class UnsupportedVariantError(StateError):
    """Operation called on a generator variant that does not support it."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite loss ({value!r}) at epoch {epoch}")
        self.epoch = epoch
        self.value = value
