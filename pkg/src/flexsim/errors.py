"""Exception types raised across the simulator."""


class SimulationError(Exception):
    """Base class for every simulator error."""


# physmem / monitor
class InvalidPage(SimulationError):
    pass


class UnknownDevice(SimulationError):
    pass


class NotMonitor(SimulationError):
    """A non-monitor actor tried to edit a translation table."""


class InvariantViolation(SimulationError):
    """A mapping change would break an isolation invariant."""


class NotPinned(SimulationError):
    pass


class AlreadyProtected(SimulationError):
    pass


class NotProtected(SimulationError):
    pass


class NotLazy(SimulationError):
    pass


class TaskInFlight(SimulationError):
    pass


class ResourcesHeld(SimulationError):
    pass


class IntegrityViolation(SimulationError):
    """The monitor image changed while protection was frozen."""


class SecurePathHalted(SimulationError):
    """Raised on any monitor call after a detected integrity violation."""


class SmmuHookRejected(SimulationError):
    """The monitor refused a kernel-initiated SMMU table change."""


# daemon / memmgr
class OutOfMemory(SimulationError):
    pass


class Unsatisfiable(SimulationError):
    """No contiguous run can be compacted for a CMA request."""


class Insufficient(SimulationError):
    """Reclaim demand exceeds everything that can be evicted."""


class SealVerifyFailure(SimulationError):
    pass


class BudgetExhausted(SimulationError):
    pass


# engine
class EngineBusy(SimulationError):
    pass


class CycleDetected(SimulationError):
    pass


# pipeline / session
class DigestMismatch(SimulationError):
    pass


class BadSignature(SimulationError):
    pass


class CapacityError(SimulationError):
    pass


class AttestationFailure(SimulationError):
    pass


class ReplayDetected(SimulationError):
    pass


class SealFailure(SimulationError):
    pass


class ConfigError(SimulationError):
    """Scenario file problem; ``str()`` carries line/field diagnostics."""

    def __init__(self, message, *, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
