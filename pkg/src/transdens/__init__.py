"""Transition densities of diffusions and their discretized Markov chains.

Parametrix-series evaluation of the diffusion density p and the chain
density p_h, Edgeworth-type step-size correction terms, brute-force
oracles, and a convergence harness.
"""

from .coeffs import Coefficient, make_coefficient
from .innovations import InnovationFamily, make_family
from .model import (
    ModelSpec,
    ValidationReport,
    averaged_cumulant,
    default_probes,
    integrated_coeffs,
    load_model_config,
    validate_assumptions,
)
from .kernels import (
    FrozenGaussianKernel,
    SpaceTimeKernel,
    apply_operator,
    frozen_density,
    frozen_density_deriv,
    kernel_H,
    operator_square_diff,
)
from .quadrature import QuadratureSpec
from .parametrix import (
    ChainEngine,
    SeriesResult,
    discrete_convolve,
    forward_density_kernel,
    frozen_chain_density,
    kernel_H_h,
    parametrix_p,
    parametrix_p_h,
    time_space_convolve,
)

from .edgeworth import (
    ExpansionTerms,
    apply_F1,
    apply_F2,
    expansion_error,
    expansion_terms,
    expansion_weight,
    pi_1,
    pi_2,
    pi_tilde_1,
    pi_tilde_2,
)
from .oracle import (
    DensityGrid,
    ck_chain_density,
    ck_default_grid,
    mc_chain_density,
    ou_exact_density,
)
from .harness import (
    ConvergenceReport,
    RateFit,
    fit_rate,
    run_convergence,
)

__version__ = "0.1.0"
