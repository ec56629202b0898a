"""Exception hierarchy shared across the package."""


class VLQError(Exception):
    """Base class for all errors raised by vlq."""


class InvalidArgument(VLQError, ValueError):
    pass


class InvalidData(VLQError, ValueError):
    pass


class CannotDownsample(InvalidArgument):
    pass


class ConsistencyError(VLQError, ValueError):
    """Two tensors that should be adjacent precisions are not."""


class ValidationError(VLQError, ValueError):
    pass


class CorruptData(VLQError):
    pass


class CorruptDataset(CorruptData):
    pass


class MissingLayer(VLQError):
    def __init__(self, levels):
        self.levels = sorted(levels)
        names = ", ".join(str(i) for i in self.levels)
        super().__init__(f"missing enhance section(s) for level(s): {names}")


class DivergenceError(VLQError):
    def __init__(self, level, message=None, checkpoint=None):
        self.level = level
        self.checkpoint = checkpoint
        super().__init__(message or f"non-finite loss at level {level}")


class DegenerateInit(VLQError, ValueError):
    pass


class Infeasible(VLQError, ValueError):
    def __init__(self, min_bits, budget):
        self.min_bits = min_bits
        self.budget = budget
        super().__init__(
            f"budget of {budget} bits is infeasible; minimum achievable is {min_bits} bits"
        )
