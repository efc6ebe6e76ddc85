"""Forward deep-learning solvers for high-dimensional BSDEs.

Two training schemes are provided: a baseline that fits one value network
and reads its gradient off the tape, and a differential scheme that fits
value/gradient/Hessian networks jointly on the dynamics of the BSDE and
of its Malliavin derivative. Estimator-style solver classes wrap the
training loop; an experiment harness reproduces the error, convergence
and runtime methodology on the bundled benchmark problems.
"""

from .errors import (
    BsdeLearnError,
    NonFiniteError,
    NotFittedError,
    ShapeError,
    SingularDiffusionError,
    TrainingDiverged,
)
from .networks import (
    MlpParams,
    MomentNormalizer,
    NetworkTriple,
    gamma_via_ad,
    load_checkpoint,
    mlp_forward,
    mlp_init,
    save_checkpoint,
    z_via_ad,
)
from .optim import AdamState, LrSchedule, adam_step, lr_at
from .problems import (
    BasketParams,
    Problem,
    basket_call_closed_form,
    basket_option,
    bounded_cosine,
    hjb_control,
    hjb_reference,
    make_problem,
    norm_cdf,
)
from .simulation import PathBatch, TimeGrid, malliavin_propagate, simulate_paths
from .metrics import aggregate, convergence_rate, mse, relative_mse
from .solvers import DLDBSDESolver, LDBSDESolver, TrainConfig, train

__all__ = [
    "AdamState",
    "BasketParams",
    "BsdeLearnError",
    "DLDBSDESolver",
    "LDBSDESolver",
    "LrSchedule",
    "MlpParams",
    "MomentNormalizer",
    "NetworkTriple",
    "NonFiniteError",
    "NotFittedError",
    "PathBatch",
    "Problem",
    "ShapeError",
    "SingularDiffusionError",
    "TimeGrid",
    "TrainConfig",
    "TrainingDiverged",
    "adam_step",
    "aggregate",
    "basket_call_closed_form",
    "basket_option",
    "bounded_cosine",
    "convergence_rate",
    "gamma_via_ad",
    "hjb_control",
    "hjb_reference",
    "load_checkpoint",
    "lr_at",
    "make_problem",
    "malliavin_propagate",
    "mlp_forward",
    "mlp_init",
    "mse",
    "norm_cdf",
    "relative_mse",
    "save_checkpoint",
    "simulate_paths",
    "train",
    "z_via_ad",
]
