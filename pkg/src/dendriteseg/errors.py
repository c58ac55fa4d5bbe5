"""Exception hierarchy shared across the package.

Domain errors exit the CLI with status 1; file/metadata errors
(``IoFailure`` and subclasses) exit with status 2.
"""


class DendriteSegError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class IoFailure(DendriteSegError):
    """File could not be read or written."""

    exit_code = 2


class SizeMismatch(IoFailure):
    """Raw file length disagrees with the sidecar dimensions."""


class BadMeta(IoFailure):
    """Sidecar JSON is missing fields or holds invalid values."""


class IndexOutOfRange(DendriteSegError):
    """Plane index outside the volume."""


class ShapeMismatch(DendriteSegError):
    """Operands disagree on shape where agreement is required."""


class EmptyOutput(DendriteSegError):
    """Convolution output would have a non-positive spatial extent."""


class NonBinaryTarget(DendriteSegError):
    """Loss targets contain values other than 0 and 1."""


class NotScalar(DendriteSegError):
    """backward() called on a non-scalar tensor."""


class DetachedTensor(DendriteSegError):
    """backward() called on a tensor with no recorded history."""


class MissingGrad(DendriteSegError):
    """Optimizer step requested for a parameter without a gradient."""


class ConfigInvalid(DendriteSegError):
    """Model or augmentation configuration violates its invariants."""


class IndivisibleInput(DendriteSegError):
    """Input spatial dims incompatible with the network's pooling ladder."""


class ManifestMismatch(DendriteSegError):
    """Checkpoint arrays disagree with the architecture they claim."""


class VersionUnknown(DendriteSegError):
    """Checkpoint format version is not understood."""


class PatchTooLarge(DendriteSegError):
    """Requested patch exceeds the volume along some axis."""


class GridMismatch(DendriteSegError):
    """Patch grid does not belong to the volume it is applied to."""


class EmptyDataset(DendriteSegError):
    """Dataset split requested on zero items."""


class BadFractions(DendriteSegError):
    """Split fractions are negative or do not sum to one."""


class NonFiniteLoss(DendriteSegError):
    """Training produced a NaN/Inf loss; aborted with diagnostics."""


class ArchitectureMismatch(DendriteSegError):
    """Checkpoint architecture differs from the requested one."""


class FrozenHyperparamChanged(DendriteSegError):
    """Fine-tuning attempted to change a frozen hyperparameter."""


class InconsistentState(DendriteSegError):
    """Scheduler bookkeeping violated an internal invariant."""


class WrongRungBoundary(DendriteSegError):
    """Trial reported a resource that is not its next rung boundary."""


class AllTrialsFailed(DendriteSegError):
    """Hyperparameter search finished with no completed trial."""


class DegenerateVolume(DendriteSegError):
    """Volume has fewer than two distinct intensities."""


class SpecInvalid(DendriteSegError):
    """Synthetic volume spec violates its invariants."""
