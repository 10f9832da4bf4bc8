"""Exception hierarchy shared by every simulator module."""


class SimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(SimError):
    pass


class AuthError(SimError):
    """Tag, MAC, or AAD verification failed."""


class KeyRevoked(AuthError):
    """The key table was destroyed by a reset or a new boot epoch."""


class ReplayError(SimError):
    """Authentic ciphertext whose IV counter is not the next expected one."""


class CounterExhausted(SimError):
    pass


class KeyKindError(SimError):
    pass


class UnknownEngine(SimError):
    pass


class AccessFault(SimError):
    """Address outside every region, or spanning two of them."""


class NotBooted(SimError):
    pass


class BootFailure(SimError):
    def __init__(self, stage: str, message: str = ""):
        super().__init__(message or f"signature check failed at stage {stage}")
        self.stage = stage


class StagingExhausted(SimError):
    pass


class QueueFull(SimError):
    pass


class QueueEmpty(SimError):
    pass


class ChecksumMismatch(SimError):
    pass


class CapabilityViolation(SimError):
    pass


class SingletonViolation(SimError):
    pass


class ChannelBusy(SimError):
    pass


class RingFull(SimError):
    pass


class InsufficientSamples(SimError):
    pass


class AttestationError(SimError):
    """A verifier stage rejected the evidence; ``reason`` is the verdict code."""

    def __init__(self, reason: str, message: str = "", indices=None):
        super().__init__(message or reason)
        self.reason = reason
        self.indices = list(indices or [])


class ScenarioError(SimError):
    def __init__(self, step_index: int, message: str):
        super().__init__(f"step {step_index}: {message}")
        self.step_index = step_index


class TraceParseError(SimError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no
