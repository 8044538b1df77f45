"""Brownian distance covariance pooling and few-shot classification heads."""
from .errors import (
    BdcError,
    ConfigError,
    InvalidInputError,
    NumericError,
    SamplingError,
    ShapeError,
    TrainingError,
)
from .kernel import (
    bdc_matrix,
    bdc_value,
    bdcorr,
    double_center,
    pairwise_sq_dist,
    pearson_corr,
    sqrt_dist,
    unvectorize,
    vectorize,
)
from .layer import PoolingConfig, Projection, bdc_backward, bdc_forward, sgd_update

__version__ = "0.1.0"
