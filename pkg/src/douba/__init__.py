"""Doubly regularized entropic Wasserstein barycenters.

The (lam, tau)-barycenter of marginals ``nu_k`` with weights ``w_k``
minimizes ``sum_k w_k T_lam(mu, nu_k) + tau H(mu)``, where ``T_lam`` is
entropic optimal transport with inner strength ``lam`` and ``H`` is the
differential entropy weighted by the outer strength ``tau``.
"""

from .barycenter import (
    BarycenterResult,
    DualState,
    dual_gradient,
    dual_objective,
    primal_objective,
    recover_barycenter,
    solve_alternating_tau_eq_lambda,
    solve_dual_ascent,
    suboptimality_certificate,
    tangent_gibbs,
)
from .eot import (
    EOTSolution,
    FirstVariation,
    PotentialPair,
    barycenter_functional,
    eot_cost,
    eot_cost_with_reference,
    first_variation,
    grad_first_variation,
    sinkhorn_divergence,
    solve_eot,
)
from .errors import (
    CertificateUndefinedError,
    ConfigError,
    ConsistencyError,
    DomainMismatchError,
    DoubaError,
    InvalidInputError,
    NumericalFailureError,
    SolverError,
    StepSizeError,
    UnsupportedDimensionError,
)
from .gaussian import (
    GaussianIso,
    barycenter_variance,
    debiasing_map,
    gaussian_barycenter,
    tau_star,
    table2_row,
    w2_per_dim,
)
from .measures import (
    BoxDomain,
    CostFunction,
    DiscreteMeasure,
    Grid,
    entropy,
    quantile_barycenter_1d,
    relative_entropy,
    sample,
    total_variation,
    wasserstein1_1d,
    wasserstein2_1d,
)
from .npgd import NPGDConfig, ParticleCloud, cloud_kde_compare, npgd_run, npgd_step
from .problem import BarycenterProblem

__version__ = "0.1.0"
