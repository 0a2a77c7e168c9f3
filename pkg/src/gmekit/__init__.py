"""Gaussian meta-embeddings extracted by heavy-tailed PLDA."""

from .data import LabeledDataset
from .gme import (
    GaussianMetaEmbedding,
    Partition,
    SharedPrecisionBasis,
    llr_binary,
    llr_partition,
    log_expectation,
    log_inner_product,
    pool,
)
from .gplda import GPldaModel, em_train, init_gme, length_normalize, plda_llr, score_params
from .htplda import GAUSSIAN, HtPldaModel, derive, extract, random_model, sample

__version__ = "0.1.0"

__all__ = [
    "GAUSSIAN",
    "GPldaModel",
    "GaussianMetaEmbedding",
    "HtPldaModel",
    "LabeledDataset",
    "Partition",
    "SharedPrecisionBasis",
    "derive",
    "em_train",
    "extract",
    "init_gme",
    "length_normalize",
    "llr_binary",
    "llr_partition",
    "log_expectation",
    "log_inner_product",
    "plda_llr",
    "pool",
    "random_model",
    "sample",
    "score_params",
]
