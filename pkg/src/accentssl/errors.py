"""Exception hierarchy shared across the package.

Exit-code mapping in the CLI: ConfigError/DataError -> 3, usage errors -> 2,
anything else -> 1.
"""


class AccentSslError(Exception):
    """Base class for all package errors."""


class ConfigError(AccentSslError):
    """Bad configuration key, value, or combination."""


class DataError(AccentSslError):
    """Bad input data: audio files, manifests, transcripts."""


class AudioFormatError(DataError):
    """WAV file exists but is not RIFF PCM16 mono."""


class ManifestError(DataError):
    """Malformed manifest: duplicate ids, missing transcripts, bad characters."""


class CheckpointError(DataError):
    """Checkpoint version mismatch, checksum failure, or missing payload."""


class InfeasibleTranscriptError(AccentSslError):
    """Transcript cannot be aligned to the given number of frames under CTC."""


class NonFiniteGradientError(AccentSslError):
    """A training step produced a NaN/Inf gradient; the step was aborted."""
