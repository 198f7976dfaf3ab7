"""Exception hierarchy shared across the package."""


class TsmuxError(Exception):
    """Base class for all package errors."""


class ValidationError(TsmuxError):
    pass


class CycleDetected(ValidationError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("dependency cycle: " + " -> ".join(self.cycle))


class DanglingEdge(ValidationError):
    def __init__(self, missing, edge):
        self.missing = missing
        self.edge = edge
        super().__init__(f"edge {edge[0]}->{edge[1]} references unknown module {missing!r}")


class ModuleMissing(ValidationError):
    def __init__(self, module):
        self.module = module
        super().__init__(f"module {module!r} is not assigned to any stage")


class ModuleDuplicated(ValidationError):
    def __init__(self, module):
        self.module = module
        super().__init__(f"module {module!r} appears in more than one stage")


class DependencyViolated(ValidationError):
    def __init__(self, upstream, downstream):
        self.edge = (upstream, downstream)
        super().__init__(f"edge {upstream}->{downstream} does not point to a later stage")


class SmOvercommit(ValidationError):
    def __init__(self, gpu, total, stage=None):
        self.gpu = gpu
        self.total = total
        self.stage = stage
        super().__init__(f"GPU {gpu} SM quota sum {total:.6g} exceeds 1.0 (stage {stage})")


class MemoryOvercommit(ValidationError):
    def __init__(self, gpu, total, capacity, stage=None):
        self.gpu = gpu
        self.total = total
        self.capacity = capacity
        self.stage = stage
        super().__init__(
            f"GPU {gpu} memory {total:.4g} B exceeds capacity {capacity:.4g} B (stage {stage})"
        )


class OutOfRange(TsmuxError):
    def __init__(self, what, value, lo, hi):
        self.what = what
        self.value = value
        super().__init__(f"{what}={value} outside profiled range [{lo}, {hi}]")


class InsufficientSamples(TsmuxError):
    pass


class DegenerateDesignMatrix(TsmuxError):
    pass


class StageInfeasible(TsmuxError):
    def __init__(self, modules, reason=""):
        self.modules = tuple(modules)
        msg = "stage {" + ",".join(self.modules) + "} has no feasible allocation"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class EmptyPlan(TsmuxError):
    pass


class InfeasibleBaseline(TsmuxError):
    pass


class TooLarge(TsmuxError):
    def __init__(self, n, limit):
        self.n = n
        super().__init__(f"{n} modules exceeds the exhaustive-search limit of {limit}")


class UnknownPreset(TsmuxError):
    pass


class UnknownSuite(TsmuxError):
    pass


class FormatError(ValidationError):
    """A structured file does not match the expected schema."""
