"""Coded errors raised across the testbed.

Everything derives from ``TestbedError`` so the CLI can turn any of them into a
one-line diagnostic and a non-zero exit. Where a built-in category fits, the
coded error subclasses it too, so callers that only know ``ValueError`` or
``IOError`` keep working.
"""


class TestbedError(Exception):
    """Root of every coded error."""

    # keep pytest from collecting this as a test class
    __test__ = False


# --- PE format --------------------------------------------------------------

class PeFormatError(TestbedError, ValueError):
    pass


class MalformedHeader(PeFormatError):
    pass


class OutOfBounds(PeFormatError):
    pass


class LayoutConflict(TestbedError, ValueError):
    pass


# --- mutation actions -------------------------------------------------------

class ActionInapplicable(TestbedError):
    pass


class PackerFailed(TestbedError):
    pass


class AlreadyPacked(ActionInapplicable):
    pass


class NotAStub(TestbedError, ValueError):
    pass


class UnknownAction(TestbedError, ValueError):
    pass


# --- detectors --------------------------------------------------------------

class DegenerateCorpus(TestbedError, ValueError):
    pass


class ScanFailed(TestbedError):
    pass


class BudgetExhausted(TestbedError):
    pass


class CheckpointError(TestbedError, ValueError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


# --- environment / agent ----------------------------------------------------

class SampleNotDetected(TestbedError):
    pass


class EpisodeFinished(TestbedError):
    pass


class EpisodeActive(TestbedError):
    pass


class BufferTooSmall(TestbedError, ValueError):
    pass


# --- evaluation / corpus ----------------------------------------------------

class NoAttackableSamples(TestbedError):
    pass


class InvalidCounts(TestbedError, ValueError):
    pass


class IoFailure(TestbedError, IOError):
    pass
