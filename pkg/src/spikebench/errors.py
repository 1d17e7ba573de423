"""Exception types raised across the toolkit."""


class SpikeBenchError(Exception):
    """Base class for all toolkit errors."""


class ParseError(SpikeBenchError, ValueError):
    """A data file row or field could not be parsed."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class LabelRangeError(SpikeBenchError, ValueError):
    pass


class FormatError(SpikeBenchError, ValueError):
    """Binary container has a wrong magic, version, or is truncated/corrupt."""


class ConsistencyError(SpikeBenchError, ValueError):
    pass


class ShapeError(SpikeBenchError, ValueError):
    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class DivergenceError(SpikeBenchError, RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class ConversionError(SpikeBenchError, ValueError):
    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class InfeasibleError(SpikeBenchError, ValueError):
    """A single neuron does not fit on an empty core."""

    def __init__(self, layer, neuron, constraint, demand, budget):
        super().__init__(
            f"neuron {neuron} of layer {layer} needs {demand} {constraint} "
            f"but a core only has {budget}"
        )
        self.layer = layer
        self.neuron = neuron
        self.constraint = constraint


class DegenerateFitError(SpikeBenchError, ValueError):
    pass


class DataError(SpikeBenchError, ValueError):
    pass


class ConfigError(SpikeBenchError, ValueError):
    pass
