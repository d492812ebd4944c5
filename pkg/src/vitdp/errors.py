"""Exception hierarchy shared by every layer of the engine."""


class VitDPError(Exception):
    pass


class DimensionError(VitDPError, ValueError):
    pass


class InputError(VitDPError, ValueError):
    pass


class UsageError(VitDPError, ValueError):
    pass


class NonFiniteError(VitDPError, FloatingPointError):
    pass


class ConfigError(VitDPError, ValueError):
    pass


class UnsupportedFeatureError(ConfigError):
    pass


class FormatError(VitDPError, ValueError):
    pass


class ProtocolError(VitDPError):
    pass


class TransportError(VitDPError, ConnectionError):
    pass


class RendezvousError(VitDPError):
    pass


class BarrierTimeoutError(VitDPError, TimeoutError):
    """Raised when a barrier does not complete in time.

    ``missing`` lists the ranks that never arrived, when the coordinator
    could determine them.
    """

    def __init__(self, message: str, missing: list[int] | None = None):
        super().__init__(message)
        self.missing = list(missing or [])


class WorkerFailure(VitDPError):
    def __init__(self, message: str, rank: int | None, status: int | None):
        super().__init__(message)
        self.rank = rank
        self.status = status
