"""Exception hierarchy for the maestro toolkit.

Every failure carries enough context (stage, section, edge, field) for the
CLI and service to report which constraint was violated and where.
"""

from __future__ import annotations


class MaestroError(Exception):
    """Base class for all maestro errors."""

    def __init__(self, message: str, **context: object):
        super().__init__(message)
        self.context = {k: v for k, v in context.items() if v is not None}

    def __str__(self) -> str:  # pragma: no cover - formatting only
        base = super().__str__()
        if self.context:
            ctx = ", ".join(f"{k}={v}" for k, v in sorted(self.context.items()))
            return f"{base} ({ctx})"
        return base


# --- spec / graph construction -----------------------------------------------


class ParseError(MaestroError):
    """Workload spec file could not be parsed or failed schema validation."""


class DuplicateSection(MaestroError):
    pass


class NoCriticalSection(MaestroError):
    pass


class MultipleCriticalSections(MaestroError):
    pass


class CycleDetected(MaestroError):
    pass


class UnknownSection(MaestroError):
    pass


class DisconnectedAuxiliary(MaestroError):
    """An auxiliary section lies on no path through the critical section."""


class EdgeNotFound(MaestroError):
    pass


class InvalidDims(MaestroError):
    pass


class BothActivated(MaestroError):
    """A sample activates two submodules merged into one exclusive section."""


class ActivationError(MaestroError):
    """A sample's activated-section set is inconsistent with its timing."""


class NegativeTime(MaestroError):
    pass


class EmptyBatch(MaestroError):
    pass


# --- cost model / optimizer ---------------------------------------------------


class InvalidConfig(MaestroError):
    """Parallelism degrees are not divisors of the structural parameters."""


class NoFeasibleConfig(MaestroError):
    pass


class CannotAvoidStall(MaestroError):
    """An auxiliary cannot keep pace with the critical section on any config."""


class FanoutViolation(MaestroError):
    """DP^fr x fanout != DP^sr on some edge of the section graph."""


class InfeasiblePlan(MaestroError):
    """An allocation plan violates one of the global resource constraints."""


# --- scheduler / simulator ----------------------------------------------------


class FanoutMismatch(MaestroError):
    pass


class InconsistentSchedule(MaestroError):
    pass


class DependencyDeadlock(MaestroError):
    """The realized event graph contains a cycle; indicates a scheduling bug."""


# --- reshard message queue ----------------------------------------------------


class IncompatibleShapes(MaestroError):
    pass


class ChannelClosed(MaestroError):
    pass


class SlotExhausted(MaestroError):
    """Destination slot budget exceeded; backpressure, never a silent drop."""


class FragmentTimeout(MaestroError):
    """A logical tensor could not be fully assembled within the timeout."""
