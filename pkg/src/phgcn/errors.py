"""Exception types shared across the pipeline."""


class ValidationError(ValueError):
    """Bad configuration or arguments (CLI exit code 1)."""


class FormatError(ValidationError):
    """Malformed PHT1 tensor file or cohort directory."""


class EmptyRoi(ValueError):
    pass


class EmptyPaMask(ValueError):
    pass


class DegenerateClass(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in tensor {name!r}")
        self.name = name


class TrainingDiverged(FloatingPointError):
    pass
