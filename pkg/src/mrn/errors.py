"""Exception hierarchy shared by all modules."""


class MRNError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MRNError):
    pass


class InputError(MRNError):
    pass


class ShapeError(MRNError):
    pass


class AdapterError(MRNError):
    pass


class ContractError(MRNError):
    pass


class DataError(MRNError):
    pass


class MissingRoiError(DataError):
    """Target nuclei labels are absent from the mask, so the ROI cannot be anchored."""


class NumericalError(MRNError):
    pass


class StorageError(MRNError):
    """A file is missing, unreadable or truncated; the message names the path."""
