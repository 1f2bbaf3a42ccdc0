"""Revocable biometric templates over interchangeable matcher instances.

A pool of matcher instances shares one recognition behavior but produces
mutually incompatible embeddings; leaking a template from one instance says
nothing useful to any other.  Revocation moves an identity to a fresh
instance, and the evaluation harness quantifies exactly how little the old
template is worth afterward.
"""

from .embedding import (
    DimMismatchError,
    EmbeddingRecord,
    FeatureVector,
    NonFiniteError,
    ZeroVectorError,
    cosine_similarity,
    normalize,
    read_records,
    write_records,
)
from .errors import RevBioError, UnknownInstanceError
from .evaluate import (
    ConsistencyReport,
    Corpus,
    InsufficientInstancesError,
    PairProtocol,
    RelationshipMatrix,
    Scenario,
    ScenarioEvent,
    ScenarioReport,
    build_scenario,
    consistency_report,
    cross_model_distributions,
    impersonation_experiment,
    relationship_matrix,
    run_scenario,
)
from .lifecycle import (
    AuditLog,
    MissingThresholdError,
    RevocableSystem,
    RevocationOutcome,
    VerificationDecision,
)
from .metrics import (
    CalibrationWarning,
    DPrimeValue,
    FoldAccuracy,
    Histogram,
    ScoreSet,
    ThresholdSpec,
    d_prime,
    fmr_threshold,
    score_histogram,
    verification_accuracy,
)
from .registry import (
    AlreadyEnrolledError,
    CorruptSnapshotError,
    DuplicateInstanceError,
    GallerySnapshot,
    IdentityRecord,
    InstancePoolExhaustedError,
    ModelInstanceRecord,
    Registry,
    SnapshotIOError,
    UnknownIdentityError,
    VersionMismatchError,
)
from .simulate import (
    CaptureDescriptor,
    EmbeddingStore,
    ExtractorPort,
    FileExtractor,
    SimWorldConfig,
    SyntheticExtractor,
    UnreachableError,
    calibrate_sigma,
    generate_corpus,
    haar_orthogonal,
    stream_rng,
    stream_seed,
    write_corpus,
)

__version__ = "0.1.0"

__all__ = [
    "AlreadyEnrolledError",
    "AuditLog",
    "CalibrationWarning",
    "CaptureDescriptor",
    "ConsistencyReport",
    "Corpus",
    "CorruptSnapshotError",
    "DPrimeValue",
    "DimMismatchError",
    "DuplicateInstanceError",
    "EmbeddingRecord",
    "EmbeddingStore",
    "ExtractorPort",
    "FeatureVector",
    "FileExtractor",
    "FoldAccuracy",
    "GallerySnapshot",
    "Histogram",
    "IdentityRecord",
    "InstancePoolExhaustedError",
    "InsufficientInstancesError",
    "MissingThresholdError",
    "ModelInstanceRecord",
    "NonFiniteError",
    "PairProtocol",
    "Registry",
    "RelationshipMatrix",
    "RevBioError",
    "RevocableSystem",
    "RevocationOutcome",
    "Scenario",
    "ScenarioEvent",
    "ScenarioReport",
    "ScoreSet",
    "SimWorldConfig",
    "SnapshotIOError",
    "SyntheticExtractor",
    "ThresholdSpec",
    "UnknownIdentityError",
    "UnknownInstanceError",
    "UnreachableError",
    "VerificationDecision",
    "VersionMismatchError",
    "ZeroVectorError",
    "build_scenario",
    "calibrate_sigma",
    "consistency_report",
    "cosine_similarity",
    "cross_model_distributions",
    "d_prime",
    "fmr_threshold",
    "generate_corpus",
    "haar_orthogonal",
    "impersonation_experiment",
    "normalize",
    "read_records",
    "relationship_matrix",
    "run_scenario",
    "score_histogram",
    "stream_rng",
    "stream_seed",
    "verification_accuracy",
    "write_corpus",
    "write_records",
]
