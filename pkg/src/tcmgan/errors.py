"""Exception types shared across the package."""


class TCMGANError(Exception):
    """Base class for all package errors."""


class ConfigError(TCMGANError, ValueError):
    pass


class ShapeError(TCMGANError, ValueError):
    pass


class MissingModality(TCMGANError, FileNotFoundError):
    def __init__(self, modality: str, where: str = ""):
        self.modality = modality
        msg = modality if not where else f"{modality} (searched {where})"
        super().__init__(msg)


class CoregistrationError(TCMGANError, ValueError):
    pass


class EmptyDataset(TCMGANError, ValueError):
    pass


class FormatError(TCMGANError, ValueError):
    pass


class VersionError(FormatError):
    pass


class DataLeakError(TCMGANError, RuntimeError):
    pass
