"""Exception hierarchy shared by every module."""


class SyncSamplerError(Exception):
    pass


class InvalidArgument(SyncSamplerError, ValueError):
    pass


class SingularityError(SyncSamplerError, ArithmeticError):
    pass


class InvalidConfiguration(SyncSamplerError, ValueError):
    pass


class TransportError(SyncSamplerError):
    """The remote denoiser could not be reached."""


class ProtocolError(SyncSamplerError):
    """The remote denoiser answered with a malformed payload."""


class RemoteError(SyncSamplerError):
    def __init__(self, status, message=""):
        super().__init__(f"remote denoiser returned HTTP {status}: {message}")
        self.status = status
