"""Exception types shared across the toolkit."""


class AffordanceError(Exception):
    """Base class for every error raised by this package."""


class InvalidPoseError(AffordanceError):
    pass


class EmptySamplesError(AffordanceError):
    pass


class InvalidParameterError(AffordanceError):
    pass


class IngestionError(AffordanceError):
    """Malformed or invariant-violating dataset input; message carries file/line."""


class DegenerateTimingError(AffordanceError):
    pass


class AnnotationError(AffordanceError):
    pass


class CacheFormatError(AffordanceError):
    pass


class MissingEmbeddingError(AffordanceError):
    pass


class ShapeError(AffordanceError):
    pass


class EmptyBatchError(AffordanceError):
    pass


class TrainingDivergenceError(AffordanceError):
    pass


class EmptySceneError(AffordanceError):
    pass


class EmptyEvalError(AffordanceError):
    pass


class ConfigError(AffordanceError):
    pass


class DegenerateSampleError(AffordanceError):
    pass


class InvalidEndpointError(AffordanceError):
    pass


class GenerationError(AffordanceError):
    pass
