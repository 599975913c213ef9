"""Exception types shared across the package."""


class LadenError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(LadenError, ValueError):
    """A parameter is out of its documented range or inconsistent."""


class InvalidSignalError(LadenError, ValueError):
    """A waveform contains non-finite samples or has an illegal shape."""


class TooShortInputError(LadenError, ValueError):
    """An utterance is shorter than the minimum the operation supports."""


class CannotSetSnrError(LadenError, ValueError):
    """SNR mixing is undefined because clean or noise has zero power."""


class EmptyManifestError(LadenError, ValueError):
    """A manifest build produced no usable records."""


class AlignmentError(LadenError, ValueError):
    """Two caches or manifests do not agree on utterance ids."""


class EncoderConflictError(LadenError, ValueError):
    """An artifact was produced by a different encoder than the one in use."""


class CorruptFileError(LadenError, IOError):
    """A serialized artifact failed its checksum or structural checks."""


class DegenerateEmbeddingError(LadenError, ValueError):
    """An embedding has zero norm where a direction is required."""


class UndefinedReferenceError(LadenError, ValueError):
    """A metric reference signal is identically zero."""


class NoSpeechFramesError(LadenError, ValueError):
    """A segmental metric found no frames above the silence threshold."""


class StageMismatchError(LadenError, ValueError):
    """Pipeline stages disagree (e.g. map fitted with a different encoder)."""


class AdaptationInterrupted(LadenError, RuntimeError):
    """A TTA run failed mid-stream; carries the resume-token path."""

    def __init__(self, message: str, resume_token_path: str):
        super().__init__(message)
        self.resume_token_path = resume_token_path
