"""Exception hierarchy.

Every error raised deliberately by the package derives from
:class:`CytoclassError`. The two intermediate classes decide the CLI exit
code: :class:`DataError` maps to 3, :class:`ModelFileError` to 4.
"""


class CytoclassError(Exception):
    """Base class for all package errors."""


class DataError(CytoclassError):
    """Problem with input data: images, manifests, feature matrices."""


class ModelFileError(CytoclassError):
    """Problem with a persisted model, cache or report file."""


# -- images ---------------------------------------------------------------

class UnsupportedFormat(DataError):
    pass


class CorruptFile(DataError):
    pass


class UnsupportedVariant(DataError):
    pass


class CropLargerThanImage(DataError):
    pass


# -- dataset --------------------------------------------------------------

class MissingClassDirectory(DataError):
    pass


class EmptyDataset(DataError):
    pass


class ClassTooSmall(DataError):
    pass


class ManifestError(DataError):
    pass


# -- features / models ----------------------------------------------------

class DimensionNotMultipleOfCell(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class EmptyValidation(DataError):
    pass


class EmptyNode(DataError):
    pass


class MissingClass(DataError):
    pass


class SingleClassInput(DataError):
    pass


class InvalidConfig(CytoclassError):
    pass


class ShapeMismatch(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class StaleCache(CytoclassError):
    pass


# -- metrics --------------------------------------------------------------

class LengthMismatch(DataError):
    pass


class EmptyMatrix(DataError):
    pass


class DegenerateClass(DataError):
    pass


# -- persistence ----------------------------------------------------------

class VersionMismatch(ModelFileError):
    pass


class ChecksumFailure(ModelFileError):
    pass


class TruncatedFile(ModelFileError):
    pass
