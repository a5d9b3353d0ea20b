"""Classical comparison system: morphological segmentation, the 101-element
handcrafted descriptor, z-score normalization, and a one-vs-one RBF SVM."""

from .features import (
    FEATURE_NAMES,
    apply_normalization,
    feature_vector,
    features_to_csv,
    haralick_features,
    intensity_features,
    normalize_features,
    nuclear_features,
    zernike_features,
    zernike_index_pairs,
)
from .segment import SegmentedNucleus, otsu_threshold, segment_nuclei
from .stain import (
    StainChannels,
    hdab_stain_matrix,
    od_from_rgb,
    rgb_from_od,
    stain_deconvolve,
)
from .svm import (
    SvmModel,
    dual_objective,
    grid_search_svm,
    load_svm,
    max_kkt_violation,
    rbf_kernel,
    save_svm,
    smo_train,
    svm_predict,
    svm_train,
)

__all__ = [
    "StainChannels",
    "stain_deconvolve",
    "hdab_stain_matrix",
    "od_from_rgb",
    "rgb_from_od",
    "SegmentedNucleus",
    "otsu_threshold",
    "segment_nuclei",
    "FEATURE_NAMES",
    "feature_vector",
    "features_to_csv",
    "haralick_features",
    "zernike_features",
    "zernike_index_pairs",
    "nuclear_features",
    "intensity_features",
    "normalize_features",
    "apply_normalization",
    "SvmModel",
    "svm_train",
    "svm_predict",
    "smo_train",
    "rbf_kernel",
    "dual_objective",
    "max_kkt_violation",
    "grid_search_svm",
    "save_svm",
    "load_svm",
]
