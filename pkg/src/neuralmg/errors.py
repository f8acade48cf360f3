"""Exception hierarchy shared by all modules."""


class NeuralMGError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(NeuralMGError, ValueError):
    pass


class OutOfRangeError(NeuralMGError, IndexError):
    pass


class DegenerateMeshError(NeuralMGError):
    pass


class UnsupportedExtensionError(NeuralMGError):
    pass


class InvalidMassError(NeuralMGError, ValueError):
    pass


class InvalidMatrixError(NeuralMGError, ValueError):
    pass


class SolverFailure(NeuralMGError, RuntimeError):
    pass


class WrongFamilyError(NeuralMGError, ValueError):
    """A patch does not match the stencil layout a model was built for."""


class MissingModelError(NeuralMGError, KeyError):
    def __init__(self, patch_size):
        self.patch_size = patch_size
        super().__init__(f"no model available for patch-size {patch_size}")

    def __str__(self):
        return self.args[0]


class TrainingFailure(NeuralMGError, RuntimeError):
    def __init__(self, epoch, message="loss became non-finite"):
        self.epoch = epoch
        super().__init__(f"{message} at epoch {epoch}")


class CorruptModelError(NeuralMGError):
    pass


class ParseError(NeuralMGError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
