"""Exception hierarchy.

Every error raised on purpose derives from :class:`QisegError`; the CLI
prints ``error: <ClassName>: <message>`` and exits nonzero.
"""


class QisegError(Exception):
    pass


class ShapeError(QisegError, ValueError):
    pass


class EmptyMaskError(QisegError, ValueError):
    pass


class ConfigError(QisegError, ValueError):
    pass


class DatasetError(QisegError):
    pass


class SplitError(QisegError):
    pass


class CheckpointError(QisegError):
    pass
