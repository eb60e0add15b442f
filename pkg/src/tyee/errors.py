"""Exception taxonomy.

Every failure surfaced by this package is a :class:`TyeeError`. The three
intermediate bases group errors by CLI exit code: configuration problems
(exit 1), data problems (exit 2), and training problems (exit 3).
"""


class TyeeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TyeeError):
    """Problems with the experiment configuration (exit code 1)."""


class DataError(TyeeError):
    """Problems reading, transforming, or caching data (exit code 2)."""


class TrainingError(TyeeError):
    """Problems during training or evaluation (exit code 3)."""


# --- signal I/O -------------------------------------------------------------

class IoFailure(DataError):
    """A file could not be read or written."""


class UnknownFormat(DataError):
    """No parser is registered for the file's format."""


class MalformedHeader(DataError):
    """A header field is unparseable or internally inconsistent."""


class TruncatedData(DataError):
    """The data region is shorter than the header declares."""


class DegenerateCalibration(DataError):
    """A channel declares digital_max == digital_min."""


class RangeOverflow(DataError):
    """A sample lies outside its channel's declared physical range."""


class DuplicateRegistration(ConfigError):
    """A registry name is already taken."""


class DuplicateFormat(DuplicateRegistration):
    """A file format identifier is already registered."""


# --- transforms -------------------------------------------------------------

class TransformError(DataError):
    """A transform failed while being applied.

    When raised from inside a pipeline, ``step_index`` holds the position of
    the failing step.
    """

    step_index: int | None = None


class UnknownTransform(ConfigError):
    """A transform name does not resolve in the registry."""


class InvalidParams(ConfigError):
    """Transform parameters failed validation."""

    def __init__(self, name: str, reason: str):
        super().__init__(f"{name}: {reason}")
        self.name = name
        self.reason = reason


class MissingChannel(TransformError):
    """A requested channel label is absent from the record."""


class InvalidBand(TransformError):
    """Filter band edges violate 0 < low < high < Nyquist."""


class InvalidRate(TransformError):
    """A resampling target rate is non-positive or not expressible."""


class InvalidWindow(TransformError):
    """A crop window violates 0 <= start < end <= duration."""


# --- dataset ----------------------------------------------------------------

class MixedRates(DataError):
    """Epoching requires all channels to share one sampling rate."""


class WindowTooLong(DataError):
    """The epoch window exceeds the record duration."""


class MissingLabel(DataError):
    """A record offers no label for the configured labeling scheme."""


class CacheCorrupt(DataError):
    """A cache entry failed its manifest or digest verification."""


class IndexOutOfRange(TyeeError, IndexError):
    """A sample index is outside [0, len)."""


class InsufficientGroups(DataError):
    """Too few distinct groups for the requested split."""


# --- metrics ----------------------------------------------------------------

class MetricError(TyeeError):
    """Base class for metric evaluation failures."""


class EmptyInput(MetricError):
    """A metric received no samples."""


class SingleClass(MetricError):
    """AUROC needs both a positive and a negative example."""


class NoPositives(MetricError):
    """AUPRC needs at least one positive example."""


class LengthMismatch(MetricError):
    """Paired sequences have different lengths."""


class NonPositiveMae(MetricError):
    """The MAE scaling formula is undefined for values <= 0."""


class ShapeMismatch(ConfigError):
    """Array or model shapes are incompatible."""


# --- trainer ----------------------------------------------------------------

class UnknownComponent(ConfigError):
    """A configured component name does not resolve in its registry."""

    def __init__(self, section: str, name: str, reason: str = ""):
        detail = f" ({reason})" if reason else ""
        super().__init__(f"{section}: unknown component {name!r}{detail}")
        self.section = section
        self.name = name


class LabelOutOfRange(TrainingError):
    """A class label is outside [0, num_classes)."""


class StaleCache(TrainingError):
    """backward() was called without a matching forward() pass."""


class VersionMismatch(DataError):
    """A checkpoint was written by an unsupported format version."""


class CorruptCheckpoint(DataError):
    """A checkpoint file failed its digest or structural checks."""


# --- configuration ----------------------------------------------------------

class ConfigSyntaxError(ConfigError):
    """The configuration text is not syntactically valid."""

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        loc = f" at line {line}, col {col}" if line is not None else ""
        super().__init__(f"{message}{loc}")
        self.line = line
        self.col = col


class SchemaError(ConfigError):
    """A configuration value violates the schema."""

    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class UnknownKey(ConfigError):
    """An override path does not resolve to an existing config key."""

    def __init__(self, path: str):
        super().__init__(f"no such config key: {path}")
        self.path = path


class TypeMismatch(ConfigError):
    """An override value has the wrong type for its key."""

    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason
