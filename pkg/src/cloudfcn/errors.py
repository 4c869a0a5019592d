"""Exception types shared across the pipeline."""


class CloudFCNError(Exception):
    """Base class for all package errors."""


class ShapeError(CloudFCNError, ValueError):
    pass


class FormatError(CloudFCNError, ValueError):
    """A file does not start with the expected header."""


class LengthError(FormatError):
    """A file payload is shorter or longer than its header advertises."""


class ConfigError(CloudFCNError, ValueError):
    pass


class IntegrityError(CloudFCNError):
    """Checkpoint checksum does not match its contents."""


class ContractError(CloudFCNError, RuntimeError):
    """An API was used out of order, e.g. backward on a stale tape."""


class DivergenceError(CloudFCNError, ArithmeticError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.value = value


class InputError(CloudFCNError, ValueError):
    pass
