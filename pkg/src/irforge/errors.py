"""Exception hierarchy. Every domain error derives from IrforgeError (CLI exit 1)."""


class IrforgeError(Exception):
    """Base class for domain errors."""

    def record(self) -> dict:
        return {"error": type(self).__name__, "message": str(self)}


class InvalidLabel(IrforgeError, ValueError):
    pass


class SchemaViolation(IrforgeError):
    """One or more schema violations; ``violations`` holds (path, reason) pairs."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(f"{p}: {r}" for p, r in self.violations))

    @property
    def path(self):
        return self.violations[0][0]

    @property
    def reason(self):
        return self.violations[0][1]


class CatalogSyntaxError(IrforgeError):
    pass


class ProbeUnavailable(IrforgeError):
    pass


class MalformedBundle(IrforgeError):
    pass


class UnknownPoint(IrforgeError):
    pass


class UnsupportedValue(IrforgeError):
    def __init__(self, point, value, available):
        self.point, self.value, self.available = point, value, list(available)
        super().__init__(
            f"{value!r} is not available for {point!r}; choose from {self.available}"
        )


class UnresolvedMandatory(IrforgeError):
    pass


class Malformed(IrforgeError):
    def __init__(self, index, reason):
        self.index, self.reason = index, reason
        super().__init__(f"entry {index}: {reason}")


class AmbiguousEntry(Malformed):
    pass


class DuplicateTarget(IrforgeError):
    pass


class PreconditionViolated(IrforgeError):
    pass


class DriverFailure(IrforgeError):
    def __init__(self, target, stderr):
        self.target, self.stderr = target, stderr
        super().__init__(f"toolchain failed on {target}: {stderr.strip()}")


class DriverSpecError(IrforgeError):
    pass


class UnknownTargetId(IrforgeError):
    pass


class StoreCorruption(IrforgeError):
    pass


class MissingArtifact(IrforgeError):
    pass


class EmptyConfig(IrforgeError):
    pass


class EmptyPlan(IrforgeError):
    pass


class ConfigNotInRecipe(IrforgeError):
    pass


class IncompatibleGpu(IrforgeError):
    pass


class MissingLayer(IrforgeError):
    pass


class EmptyInput(IrforgeError):
    pass


class Unparseable(IrforgeError):
    pass


class ProviderError(IrforgeError):
    def __init__(self, status, body):
        self.status, self.body = status, body
        super().__init__(f"provider returned HTTP {status}: {body[:200]}")


class ProviderTimeout(IrforgeError):
    pass


class EmptyAxis(IrforgeError):
    pass
