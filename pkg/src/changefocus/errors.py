"""Exception types raised across the package."""


class ChangeFocusError(Exception):
    pass


class ShapeError(ChangeFocusError, ValueError):
    pass


class PreconditionError(ChangeFocusError, ValueError):
    pass


class ConfigError(ChangeFocusError, ValueError):
    pass


class InputError(ChangeFocusError, ValueError):
    pass


class IngestionError(ChangeFocusError, IOError):
    pass


class DivergenceError(ChangeFocusError, RuntimeError):
    """Training loss went non-finite or blew up past the divergence threshold."""

    def __init__(self, epoch: int, lr: float, loss: float, reason: str = "non-finite loss"):
        self.epoch = epoch
        self.lr = lr
        self.loss = loss
        self.reason = reason
        super().__init__(f"training diverged at epoch {epoch} (lr={lr:.3g}, loss={loss}): {reason}")
