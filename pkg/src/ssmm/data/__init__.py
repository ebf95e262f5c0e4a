from .augment import (
    FINETUNE_AUG,
    PRETRAIN_AUG,
    AugmentationConfig,
    augment_batch,
    augment_image,
    corrupt_tabular,
)
from .io import read_cohort, read_volumes, write_cohort, write_volumes
from .preprocessing import (
    MiceImputer,
    TabularPreprocessor,
    ZScoreScaler,
    apply_zscore,
    fit_zscore,
    mice_impute,
    mode_fill,
    one_hot,
)
from .sampling import MultimodalBatch, balanced_batches, stratified_split, strata_keys
from .schema import DEFAULT_SCHEMA, Feature, TabularSchema
from .synthetic import Cohort, SyntheticConfig, generate_synthetic

__all__ = [
    "AugmentationConfig",
    "Cohort",
    "DEFAULT_SCHEMA",
    "FINETUNE_AUG",
    "Feature",
    "MiceImputer",
    "MultimodalBatch",
    "PRETRAIN_AUG",
    "SyntheticConfig",
    "TabularPreprocessor",
    "TabularSchema",
    "ZScoreScaler",
    "apply_zscore",
    "augment_batch",
    "augment_image",
    "balanced_batches",
    "corrupt_tabular",
    "fit_zscore",
    "generate_synthetic",
    "mice_impute",
    "mode_fill",
    "one_hot",
    "read_cohort",
    "read_volumes",
    "stratified_split",
    "strata_keys",
    "write_cohort",
    "write_volumes",
]
