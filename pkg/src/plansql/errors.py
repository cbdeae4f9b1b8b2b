"""Exception types shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PipelineError):
    """Bad or inconsistent run configuration; raised before any work starts."""


class DatasetError(PipelineError):
    """Malformed split file, broken invariant, or unreadable database."""


class DatasetIntegrityError(PipelineError):
    """A gold query failed to execute; the dataset itself is broken."""


class RetrievalBackendError(PipelineError):
    """The embedding backend failed or returned malformed vectors."""


class GatewayError(PipelineError):
    """Chat backend failed after exhausting retries."""


class UnmatchedPromptError(GatewayError):
    """Mock script had no rule for a request; usually a test-fixture bug."""


class PromptAssemblyError(PipelineError):
    """Prompt inputs violate assembly invariants (e.g. duplicate guideline ids)."""


class CollectionError(PipelineError):
    """Failure harvesting could not recover a required artifact."""


class ClusterValidationError(PipelineError):
    """An edited cluster file no longer partitions the failure set."""


class DistillationError(PipelineError):
    """A distillation completion could not be parsed into guidelines."""
