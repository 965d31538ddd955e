"""Exception types shared across hvlab modules."""


class HvlabError(Exception):
    """Base class for all hvlab errors."""


class UnresolvedWindow(HvlabError):
    """Window width sqrt(hbar) is too small for the position grid."""


class WindowKindMismatch(HvlabError):
    """Operation requires a specific window kind (e.g. gaussian smoothing)."""


class GridMismatch(HvlabError):
    """Operands live on different or incompatible grids."""


class NonOrthonormalOrbitals(HvlabError):
    """Slater construction got orbitals that are not orthonormal on the grid."""


class OrderExceedsN(HvlabError):
    """Reduced density of order k > N requested."""


class CapacityExceeded(HvlabError):
    """Requested object exceeds a documented memory/dimension cap."""


class InsufficientSnapshots(HvlabError):
    """Time-derivative stencil needs more trajectory snapshots."""


class DegenerateSeries(HvlabError):
    """Scaling fit got a series it cannot fit (too short, zero values, ...)."""


class ProblemTooLarge(HvlabError):
    """Exact transport problem exceeds the documented size cap."""


class ConfigInvalid(HvlabError):
    """Experiment configuration failed validation.

    Carries a list of (field, message) pairs in ``fields``.
    """

    def __init__(self, fields):
        self.fields = list(fields)
        lines = "; ".join(f"{name}: {msg}" for name, msg in self.fields)
        super().__init__(f"invalid config: {lines}")


class PartialFailure(HvlabError):
    """A sweep finished with some member runs failed.

    ``completed`` and ``failed`` list the member labels.
    """

    def __init__(self, completed, failed):
        self.completed = list(completed)
        self.failed = list(failed)
        super().__init__(
            f"sweep finished with failures: ok={self.completed} failed={self.failed}"
        )
