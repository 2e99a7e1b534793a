"""Exception taxonomy shared by the whole toolkit.

Every domain failure derives from ToolkitError so the CLI can map it to
exit status 1 with the class name on stderr.
"""


class ToolkitError(Exception):
    pass


# --- MTAR container ---------------------------------------------------------

class MtarError(ToolkitError):
    pass


class BadMagic(MtarError):
    pass


class UnsupportedVersion(MtarError):
    pass


class InvariantViolation(MtarError):
    pass


class MalformedHeader(InvariantViolation):
    pass


class OverlappingTensors(InvariantViolation):
    pass


class DanglingReference(InvariantViolation):
    pass


class CycleDetected(InvariantViolation):
    pass


# --- tensor engine ----------------------------------------------------------

class EngineError(ToolkitError):
    pass


class ShapeMismatch(EngineError):
    pass


class NonFiniteInput(EngineError):
    pass


class NonDifferentiableNode(EngineError):
    pass


class DivergedLoss(EngineError):
    pass


# --- payload codec ----------------------------------------------------------

class CodecError(ToolkitError):
    pass


class LengthMismatch(CodecError):
    pass


class NotACandidate(CodecError):
    pass


class CapacityExceeded(CodecError):
    pass


class EmptyPayload(CodecError):
    pass


class IntegrityError(CodecError):
    pass


class LengthOutOfRange(CodecError):
    pass


# --- injection strategy -----------------------------------------------------

class EmptyTestSet(ToolkitError):
    pass


# --- backdoor transform -----------------------------------------------------

class BackdoorError(ToolkitError):
    pass


class EmptyDataset(BackdoorError):
    pass


class PatchLargerThanImage(BackdoorError):
    pass


class SingleClassDataset(BackdoorError):
    pass


class MultipleInputs(BackdoorError):
    pass


class MultipleOutputs(BackdoorError):
    pass


class NameCollision(BackdoorError):
    pass


class FlagNodeMissing(BackdoorError):
    pass


# --- dataset I/O ------------------------------------------------------------

class IdxError(ToolkitError):
    pass


class BadIdxMagic(IdxError):
    pass


class CountMismatch(IdxError):
    pass


class TruncatedFile(IdxError):
    pass
