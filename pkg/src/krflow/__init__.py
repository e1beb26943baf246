"""Estimation of monotone triangular (Knothe-Rosenblatt) transport maps by
maximum likelihood, with exact oracles and a seeded experiment harness."""

from .core import (
    HypothesisError,
    SeedSpec,
    SingularMatrixError,
    best_ordering,
    check_inverse_bounds,
    invert_upper_triangular,
    rate_exponents,
)
from .densities import (
    Banana,
    Gaussian,
    GaussianMixture,
    Product,
    Sine,
    SupportBox,
    UniformBox,
    density_from_config,
)
from .kr_exact import (
    gaussian_to_gaussian_kr,
    invert_triangular_map,
    kr_to_standard_gaussian,
    numerical_kr,
    pushforward_density,
    rosenblatt_transform,
)
from .kernels import BACKEND
from .metrics import fit_loglog_slope, mc_kl_between, sobolev_error, sup_grid_error, test_nll
from .objective import (
    LossConfig,
    OptimizerOptions,
    empirical_loss,
    kl_change_of_variables_check,
    loss_gradient,
    optimize,
    optimize_separable,
    per_coordinate_loss,
)
from .param_maps import JacobianFlow, MonotoneMap, flow_eval_with_logdet, map_eval, map_param_jacobian

__version__ = "0.1.0"
