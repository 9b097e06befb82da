"""Exception hierarchy; each family maps onto one CLI exit code."""


class ProtoSEDError(Exception):
    exit_code = 2


class UsageError(ProtoSEDError):
    exit_code = 1


class DataError(ProtoSEDError):
    """Bad or insufficient input data (files, annotations, pools)."""

    exit_code = 2


class IngestionError(DataError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = path


class AudioFormatError(IngestionError):
    pass


class AnnotationError(DataError):
    pass


class EpisodeError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericalError(ProtoSEDError):
    exit_code = 3
