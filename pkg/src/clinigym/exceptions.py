"""Exceptions raised by clinigym."""


class ClinigymError(Exception):
    """Base class for clinigym errors."""


class DomainNotRegisteredError(ClinigymError):
    """A task names a domain nobody registered."""


class EpisodeFinishedError(ClinigymError):
    """step() called on a terminal episode."""


class RegistrationError(ClinigymError):
    """A tool or domain could not be registered."""


class IngestionError(ClinigymError):
    """A passage stream could not be indexed."""


class QuerySyntaxError(ClinigymError):
    """A boolean search query is malformed."""


class PassageNotFoundError(ClinigymError):
    """A doc_id is not in the index."""


class EmptySuiteError(ClinigymError):
    """A task file yielded no valid task."""


class TaskValidationError(ClinigymError):
    """A task record violates the task schema."""


class ConversionError(ClinigymError):
    """A source record cannot be converted into a task."""


class ContractViolationError(ClinigymError, ValueError):
    """A caller broke a numeric or shape precondition."""


class VocabularyError(ClinigymError):
    """A token is not part of the policy vocabulary."""


class ProtocolError(ClinigymError):
    """A bridge peer sent something the protocol does not allow."""


class RolloutFailedError(ClinigymError):
    """Collecting a rollout group failed."""


class CheckpointError(ClinigymError):
    """A checkpoint file is unreadable or has the wrong layout."""


class UsageError(ClinigymError):
    """An unknown experiment, policy or variant was requested."""


class ToolExecutionError(ClinigymError):
    """A tool handler rejected its input; surfaces as a soft error result."""
