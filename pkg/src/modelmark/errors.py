"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command-line front end; the
class name doubles as the machine-readable error name printed on stderr.
"""


class ModelMarkError(Exception):
    exit_code = 1


# -- app packages ---------------------------------------------------------

class PackageError(ModelMarkError):
    exit_code = 4


class NotAnArchive(PackageError):
    pass


class MissingManifest(PackageError):
    pass


class CorruptEntry(PackageError):
    pass


class EntryMissing(PackageError):
    pass


class SealedPackage(EntryMissing):
    """The manifest forbids repackaging (anti-repackaging protection)."""


class UnknownKey(PackageError):
    pass


class DecryptionFailed(PackageError):
    pass


# -- serialized model format ----------------------------------------------

class FormatError(ModelMarkError):
    exit_code = 4


class BadMagic(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class TruncatedSection(FormatError):
    pass


class NonCanonicalLayout(FormatError):
    pass


class MalformedRecord(FormatError):
    pass


class IndexOutOfRange(FormatError):
    pass


class ArityMismatch(FormatError):
    pass


class BufferSizeMismatch(FormatError):
    pass


class InvalidGraph(FormatError):
    pass


class MultipleInputs(FormatError):
    pass


class MultipleOutputs(FormatError):
    pass


class BadDataset(FormatError):
    pass


# -- writable models / inference ------------------------------------------

class ModelError(ModelMarkError):
    pass


class InvariantViolation(ModelError):
    pass


class NoFullyConnectedLayer(ModelError):
    pass


class NotFullyConnected(ModelError):
    pass


class ShapeMismatch(ModelError):
    pass


class NonFiniteValue(ModelError):
    pass


class UnsupportedDtype(ModelError):
    pass


class NonFiniteActivation(ModelError):
    pass


# -- numerics --------------------------------------------------------------

class NumericsError(ModelMarkError):
    pass


class NoConvergence(NumericsError):
    pass


class DimensionMismatch(NumericsError):
    pass


class RankCollapse(NumericsError):
    pass


# -- watermark embedding ---------------------------------------------------

class WatermarkError(ModelMarkError):
    pass


class InvalidWatermarkSpec(WatermarkError):
    exit_code = 2


class TriggerTooLarge(WatermarkError):
    pass


class EmptyTargetClass(WatermarkError):
    pass


class PoolExhausted(WatermarkError):
    pass


class DegenerateLabeling(WatermarkError):
    pass


class InsufficientData(WatermarkError):
    exit_code = 2


class LabelOutOfRange(WatermarkError):
    exit_code = 2


class GoalNotMet(WatermarkError):
    exit_code = 3


class SeparationTooSmall(WatermarkError):
    pass


# -- verification ----------------------------------------------------------

class VerificationError(ModelMarkError):
    pass


class EmptyWatermarkSet(VerificationError):
    pass


class EmptyTestSet(VerificationError):
    pass
