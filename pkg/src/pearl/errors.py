"""Exception types shared across the package."""


class PearlError(Exception):
    """Base class for all package errors."""


class WomError(PearlError):
    """Invalid message/codeword width or an undecodable codeword."""


class WomInvariantViolation(PearlError):
    """A program attempted to clear an already-set flash bit (1 -> 0)."""


class DoubleProgramLimit(PearlError):
    """A page was programmed more than twice since its last erase."""


class SnapshotFormatError(PearlError):
    """Malformed snapshot file."""


class HeaderError(PearlError):
    """Missing or corrupt device header."""


class UnmappedLpn(PearlError, KeyError):
    """Lookup of a logical page that was never written (or was trimmed)."""


class DeviceFull(PearlError):
    """No free pages remain and garbage collection cannot reclaim space."""


class NoPublicCover(PearlError):
    """A hidden write found no public data to cloak with."""


class ModeError(PearlError):
    """Hidden operation attempted while mounted public-only."""


class TraceFormatError(PearlError):
    """Malformed workload trace line."""
