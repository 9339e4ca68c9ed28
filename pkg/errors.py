"""Exception hierarchy shared by every stage of the intent gate."""


class IntentGateError(Exception):
    """Base class for all intent gate failures."""


class MalformedJson(IntentGateError):
    pass


class SchemaViolation(IntentGateError):
    """A document failed validation; `pointer` is an RFC 6901 pointer."""

    def __init__(self, pointer, reason):
        self.pointer = pointer
        self.reason = reason
        super().__init__(f"{pointer or '(root)'}: {reason}")


class UnsupportedLegacyShape(IntentGateError):
    pass


class UncanonicalizableNumber(IntentGateError):
    pass


class InvalidSeed(IntentGateError):
    pass


class MalformedSignature(IntentGateError):
    pass


class ClockInvalid(IntentGateError):
    pass


class TimestampRegression(IntentGateError):
    pass


class PointerUnresolvable(IntentGateError):
    def __init__(self, path, reason="pointer does not resolve"):
        self.path = path
        self.reason = reason
        super().__init__(f"{path}: {reason}")


class ForbiddenModification(PointerUnresolvable):
    pass


class ResultInvalid(IntentGateError):
    """Applying modifications produced a document that is not a valid intent."""

    def __init__(self, violation):
        self.violation = violation
        super().__init__(f"modified intent is invalid: {violation}")


class GateRefused(IntentGateError):
    def __init__(self, report):
        self.report = report
        failed = report.failed_step
        super().__init__(f"gate refused at {failed.value if failed else '?'}")


class ScenarioConfigError(IntentGateError):
    pass


class DeadlineExceeded(IntentGateError):
    pass


class InsufficientBalance(IntentGateError):
    pass
