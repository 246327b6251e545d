"""Equivalent-loss view of uncertainty sampling, with numerical audits.

Uncertainty sampling that queries with probability U and steps on the
plain loss gradient is, in expectation, gradient descent on a different
objective: the equivalent loss whose derivative is U times the original
loss derivative. This package implements that correspondence end to end:
closed-form equivalent losses for the classic uncertainty measures, their
classification-calibration link functions, loss-as-uncertainty variants,
and stream/pool samplers whose mean updates are verified against the
claimed targets by Monte-Carlo checks at frozen states.
"""

from .models_losses import (
    KernelSpec,
    LabeledSample,
    LossSpec,
    ParamVector,
    loss,
    loss_grad,
    predict,
)
from .uncertainty import UncertaintySpec, uncertainty
from .equivalent_loss import (
    PairSpec,
    convexity_probe,
    equivalent_loss_closed,
    equivalent_loss_numeric,
    make_pair,
)
from .link_functions import (
    LinkFunction,
    closed_link,
    numeric_link,
    taylor_coefficient,
    transfer_risk,
)
from .oracles import (
    GaussianMixtureOracle,
    LossCalibrator,
    bayes_excess,
    conditional_loss,
    posterior,
)
from .data_io import (
    CsvSchema,
    DatasetHandle,
    load_csv,
    reference_mixture,
    sample_mixture,
)
from .sampler import (
    AlgorithmSpec,
    FrozenState,
    HAVE_COMPILED,
    RunRecord,
    expected_update_check,
    run_mixture,
    run_pool,
    run_stream,
    run_topk,
)

__version__ = "0.1.0"

__all__ = [
    "AlgorithmSpec",
    "CsvSchema",
    "DatasetHandle",
    "FrozenState",
    "GaussianMixtureOracle",
    "HAVE_COMPILED",
    "KernelSpec",
    "LabeledSample",
    "LinkFunction",
    "LossCalibrator",
    "LossSpec",
    "PairSpec",
    "ParamVector",
    "RunRecord",
    "UncertaintySpec",
    "bayes_excess",
    "closed_link",
    "conditional_loss",
    "convexity_probe",
    "equivalent_loss_closed",
    "equivalent_loss_numeric",
    "expected_update_check",
    "load_csv",
    "loss",
    "loss_grad",
    "make_pair",
    "numeric_link",
    "posterior",
    "predict",
    "reference_mixture",
    "run_mixture",
    "run_pool",
    "run_stream",
    "run_topk",
    "sample_mixture",
    "taylor_coefficient",
    "transfer_risk",
    "uncertainty",
]
