"""Exception types shared across the pipeline."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    pass


class InsufficientLengthError(ContractError):
    pass


class AlignmentError(ContractError):
    pass


class GapError(ContractError):
    def __init__(self, missing, message=None):
        self.missing = missing
        super().__init__(message or f"missing time step {missing}")


class DegenerateChannelError(ContractError):
    pass


class DegenerateRangeError(ContractError):
    pass


class DegenerateMaskError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class FrozenWeightDrift(RuntimeError):
    pass


class MissingArtifactError(FileNotFoundError):
    def __init__(self, stage, path):
        self.stage = stage
        self.path = path
        super().__init__(f"missing {path}: run {stage} first")
