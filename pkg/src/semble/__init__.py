"""Rating-similarity metric learning and retrieval diagnostics."""

from .annotations import (
    RegressionReport,
    build_regression_report,
    inter_observer_rmse,
    mahalanobis_to_raters,
    param_entropy,
    per_param_correlation,
    per_param_rmse,
)
from .data import AnnotationRecord, Dataset, PatchRecord, load_dataset, save_dataset
from .errors import (
    ConfigError,
    DegenerateInputError,
    DomainError,
    FormatError,
    NormalizationError,
    NotEnoughRatersError,
    SchemaError,
    SembleError,
)
from .losses import (
    BatchTargets,
    LossResult,
    dm_kl,
    dm_logcosh,
    dm_pearson,
    dm_ranked_pearson,
    logcosh_regression,
    multi_task_combine,
    row_softmax,
    siamese_distance_loss,
)
from .model import (
    EmbeddingModel,
    ModelConfig,
    embedding_distance_matrix,
    forward,
    init_model,
    load_checkpoint,
    predict_ratings,
    rating_head,
    save_checkpoint,
)
from .pipeline import (
    CV_CONFIGS,
    CVConfig,
    ExperimentSpec,
    aggregate_results,
    generate_synthetic,
    import_embeddings,
    normalize_patch,
    run_experiment,
    run_prediction_step,
    run_retrieval_step,
    select_representative_slice,
    split_groups,
    validate_cv_configs,
)
from .ratings import (
    DEFAULT_SCHEMA,
    CharacteristicSchema,
    DistanceMatrix,
    MalignancyClass,
    RatingSet,
    RatingVector,
    malignancy_class,
    mean_rating,
    rating_l2,
    set_distance,
    set_distance_matrix,
)
from .retrieval import (
    EmbeddingIndex,
    HubReport,
    KOccurrenceProfile,
    build_index,
    hub_report,
    hubness_index,
    hubness_skewness,
    k_occurrences,
    knn_query,
    rating_correlation,
)
from .training import TrainData, TrainResult, TrainSchedule, train

__version__ = "0.1.0"
