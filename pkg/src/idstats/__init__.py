"""Tabular intrusion-detection analysis toolkit.

Pieces: columnar CSV ingestion with schema-driven encoding, robust scaling
and correlation-aware feature selection, native tree ensembles (CART, random
forest, histogram GBDT) with stratified cross-validation, per-class Gaussian
kernel density estimates, Jensen-Shannon distances between class-conditional
densities, and a Westfall-Young max-T permutation test with FWER-adjusted
p-values. The ``idstats`` CLI orchestrates the stages from one config file.
"""

from ._version import __version__
from .config import RunConfig, load_config
from .density import (
    DensityPair,
    EvalGrid,
    KdeModel,
    cv_bandwidth,
    fit_kde,
    js_distance,
    js_distance_from_masses,
    kde_eval,
    make_grid,
    overlap_coefficient,
    overlap_intervals,
    scott_bandwidth,
    shape_summary,
    silverman_bandwidth,
    to_mass_pair,
)
from .errors import ConfigError, DataError, DataQualityWarning, IdstatsError
from .evaluation import (
    CvReport,
    confusion_matrix,
    cross_validate,
    grid_search,
    prf_macro,
    roc_auc_ovr_macro,
    stratified_kfold,
)
from .preprocess import (
    EngineeredFeature,
    correlation_matrix,
    drop_correlated,
    engineer_features,
    iqr_outlier_mask,
    kendall_tau_b,
    pearson_corr,
    quantile,
    robust_fit,
    robust_transform,
)
from .tabular import (
    ColumnSchema,
    ColumnTable,
    LabelVocabulary,
    apply_encoders,
    dedup,
    fit_encoders,
    load_csv,
    stratified_split,
)
from .trees import (
    ModelSpec,
    derive_seed,
    fit_forest,
    fit_gbdt,
    fit_model,
    fit_tree,
    impurity_importance,
    load_model,
    model_from_dict,
    model_to_dict,
    permutation_importance,
    predict_labels,
    predict_proba,
    rfe,
    save_model,
)
from .wytest import WyConfig, WyTestReport, decide, observed_stats, wy_maxT

__all__ = [
    "__version__",
    "ColumnSchema",
    "ColumnTable",
    "ConfigError",
    "CvReport",
    "DataError",
    "DataQualityWarning",
    "DensityPair",
    "EngineeredFeature",
    "EvalGrid",
    "IdstatsError",
    "KdeModel",
    "LabelVocabulary",
    "ModelSpec",
    "RunConfig",
    "WyConfig",
    "WyTestReport",
    "apply_encoders",
    "confusion_matrix",
    "correlation_matrix",
    "cross_validate",
    "cv_bandwidth",
    "decide",
    "dedup",
    "derive_seed",
    "drop_correlated",
    "engineer_features",
    "fit_encoders",
    "fit_forest",
    "fit_gbdt",
    "fit_kde",
    "fit_model",
    "fit_tree",
    "grid_search",
    "impurity_importance",
    "iqr_outlier_mask",
    "js_distance",
    "js_distance_from_masses",
    "kde_eval",
    "kendall_tau_b",
    "load_csv",
    "load_config",
    "load_model",
    "make_grid",
    "model_from_dict",
    "model_to_dict",
    "observed_stats",
    "overlap_coefficient",
    "overlap_intervals",
    "pearson_corr",
    "permutation_importance",
    "predict_labels",
    "predict_proba",
    "prf_macro",
    "quantile",
    "rfe",
    "robust_fit",
    "robust_transform",
    "roc_auc_ovr_macro",
    "save_model",
    "scott_bandwidth",
    "shape_summary",
    "silverman_bandwidth",
    "stratified_kfold",
    "stratified_split",
    "to_mass_pair",
    "wy_maxT",
]
