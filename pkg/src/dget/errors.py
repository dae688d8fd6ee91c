"""Exception hierarchy shared across the dget packages."""


class DgetError(Exception):
    """Base class for all dget errors."""


# --- assembly / program structure ---

class AsmSyntaxError(DgetError):
    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DuplicateMethod(DgetError):
    pass


class UnknownLabel(DgetError):
    pass


# --- verification ---

class VerificationFailed(DgetError):
    """Base for verifier rejections; carries method name and index when known."""

    def __init__(self, msg, method=None, index=None):
        super().__init__(msg)
        self.method = method
        self.index = index


class InconsistentStackDepth(VerificationFailed):
    pass


class StackUnderflow(VerificationFailed):
    pass


class NonZeroDepthAtCheckpoint(VerificationFailed):
    pass


class ForbiddenOpcodeInSource(VerificationFailed):
    pass


class UnreachableCode(VerificationFailed):
    pass


class NonZeroDepthAtTarget(VerificationFailed):
    pass


# --- instrumentation / loading ---

class LoadRejected(DgetError):
    def __init__(self, method, handler_index):
        super().__init__(
            f"method {method!r} handler {handler_index} catches the termination tag"
        )
        self.method = method
        self.handler_index = handler_index


class AlreadyInstrumented(DgetError):
    pass


# --- vm ---

class IllegalFlagTransition(DgetError):
    pass


class NotQuiescent(DgetError):
    pass


class RuntimeFault(DgetError):
    """Uncaught (non-termination) exception inside a ghost program."""

    def __init__(self, tag, thread, method, index):
        super().__init__(f"uncaught {tag!r} in thread {thread} at {method}:{index}")
        self.tag = tag
        self.thread = thread
        self.method = method
        self.index = index


# --- snapshot ---

class DigestMismatch(DgetError):
    pass


class UnsupportedVersion(DgetError):
    pass


class MalformedField(DgetError):
    pass


class ApcOutOfRange(DgetError):
    pass


class UnknownMethod(DgetError):
    pass


# --- authz ---

class WrongDomain(DgetError):
    pass


class InvalidWindow(DgetError):
    pass


class WindowNotNested(DgetError):
    pass


class UnknownCounter(DgetError):
    pass


# --- nucleus ---

class AuthFailed(DgetError):
    pass


class PolicyDenied(DgetError):
    pass


class UnknownEntity(DgetError):
    pass


class UnknownOperation(DgetError):
    pass


class IllegalTransition(DgetError):
    pass


class TargetRefused(DgetError):
    pass


class QuiescenceTimeout(DgetError):
    pass


class TransferFailed(DgetError):
    pass


class DuplicateEntity(DgetError):
    pass


class InvokeTimeout(DgetError):
    pass


class BadConfig(DgetError):
    pass


class AddressInUse(DgetError):
    pass
