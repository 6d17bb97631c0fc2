"""Advisory file locking for containers and the catalog.

Two sidecar files guard each target:

* ``<path>.lock``  -- writer mutex. A write-mode handle holds an exclusive
  flock on it for its whole life, enforcing single-writer/multiple-readers
  across threads and processes.
* ``<path>.latch`` -- footer latch. Mutations of the trailing footer take it
  exclusively; readers take it shared while locating and parsing the footer,
  so a footer publish is never observed half-written.

flock is used instead of POSIX record locks because its per-open-file
semantics also exclude threads of the same process.
"""

import fcntl
import os
import time
from contextlib import contextmanager

from .errors import LockTimeoutError, SingleWriterViolation

_POLL_S = 0.002


def _open_lockfile(path: str) -> int:
    return os.open(path, os.O_RDWR | os.O_CREAT, 0o644)


class WriterLock:
    """Exclusive writer mutex on ``<target>.lock``, held until release()."""

    def __init__(self, target):
        self.path = str(target) + ".lock"
        self._fd = None

    def acquire(self, timeout: float = 0.0) -> None:
        """Acquire exclusively; timeout <= 0 means fail fast.

        Raises SingleWriterViolation when failing fast, LockTimeoutError when
        the deadline expires.
        """
        fd = _open_lockfile(self.path)
        deadline = time.monotonic() + max(timeout, 0.0)
        while True:
            try:
                fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
                self._fd = fd
                return
            except OSError:
                if timeout <= 0:
                    os.close(fd)
                    raise SingleWriterViolation(
                        f"another writer holds {self.path!r}"
                    ) from None
                if time.monotonic() >= deadline:
                    os.close(fd)
                    raise LockTimeoutError(
                        f"writer lock on {self.path!r} not acquired "
                        f"within {timeout:.3f}s"
                    ) from None
                time.sleep(_POLL_S)

    def release(self) -> None:
        if self._fd is not None:
            fcntl.flock(self._fd, fcntl.LOCK_UN)
            os.close(self._fd)
            self._fd = None

    @property
    def held(self) -> bool:
        return self._fd is not None


@contextmanager
def footer_latch(target, exclusive: bool):
    """Hold the footer latch of ``target`` for the duration of the block."""
    fd = _open_lockfile(str(target) + ".latch")
    try:
        fcntl.flock(fd, fcntl.LOCK_EX if exclusive else fcntl.LOCK_SH)
        yield
    finally:
        fcntl.flock(fd, fcntl.LOCK_UN)
        os.close(fd)


def default_lock_timeout() -> float:
    """Writer-lock wait budget in seconds, from ABRIDGE_LOCK_TIMEOUT_MS."""
    ms = os.environ.get("ABRIDGE_LOCK_TIMEOUT_MS")
    if not ms:
        return 0.0
    return float(ms) / 1000.0
