"""softgate: closed-form variational inference for precision-gated factor graphs.

The library composes five factor types (precision-weighted inner product,
exponential link, gamma, normal, equality) into Forney-style factor
graphs and runs variational/belief-propagation message passing with
Bethe-free-energy-driven fixed-point solves on the non-conjugate edges.

Subpackages
-----------
- ``families``: exponential-family beliefs and messages
- ``rules``: the per-factor message catalog
- ``graph``: graph construction, validation, schedules, serialization
- ``bfe``: Bethe free energy evaluation and the local edge objectives
- ``fixedpoint``: natural-gradient solvers for exp-link-adjacent edges
- ``engine``: the sweep-based inference loop
- ``models``: ready-made ensemble model builders and metrics
- ``oracles``: quadrature and brute-force verification oracles
"""

from .families import (
    DegenerateBeliefError,
    DomainError,
    FamilyError,
    Flat,
    Gamma,
    Gaussian,
    LogGamma,
    LogNormal,
    MvGaussian,
    PointMass,
    SaturationError,
    entropy,
    gamma_stats,
    gaussian_fisher,
    gaussian_mgf,
    multiply_same_family,
    natural_product,
)
from .bfe import BfeBreakdown, bethe_free_energy
from .engine import InferenceConfig, Marginals, infer, predictive
from .fixedpoint import (
    FixedPointResult,
    SolverConfig,
    solve_gamma_edge,
    solve_gaussian_edge,
)
from .graph import (
    FactorGraph,
    GraphError,
    LineType,
    NodeKind,
    Schedule,
    build_schedule,
    validate_proper,
)
from .models import (
    Depth2ExpertSpec,
    EnsembleData,
    ExpertPriors,
    TreeLeafSpec,
    XOR_EXPERTS,
    build_decision_tree,
    build_depth0,
    build_depth2,
    build_noisy,
    build_pge,
    fit_ensemble,
    make_synthetic,
    metrics,
    predict_ensemble,
)

__version__ = "0.1.0"
