"""Exception hierarchy shared by every vloc module."""


class VlocError(Exception):
    pass


class DegenerateGeometryError(VlocError):
    """Two-view geometry cannot produce a reliable point (parallax or depth)."""


class CollinearPointsError(VlocError):
    """Control points do not span a plane; the similarity is not unique."""


class InvalidParametersError(VlocError, ValueError):
    pass


class SeedFailureError(VlocError):
    """No frame pair passes the match-count / parallax requirements."""


class EmptyModelError(VlocError):
    pass


class ModelFormatError(VlocError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class AlignmentMissingError(VlocError):
    pass


class ConfigError(VlocError, ValueError):
    pass
