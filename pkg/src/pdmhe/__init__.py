"""Primal-dual learned moving horizon estimation for linear systems with
box-constrained truncated-Gaussian noise.

The package solves the windowed constrained estimation QP and its explicit
dual, trains fast feedforward surrogates for both, certifies them offline
by randomized sampling and online through the weak-duality gap, and audits
the resulting estimator against a closed-form stability bound.
"""

from .errors import (
    AcceptanceTooLow,
    DimensionMismatch,
    Diverged,
    DomainError,
    Infeasible,
    InsufficientSamples,
    MaxIterations,
    NotSPD,
    PdmheError,
    SingularInnovation,
    WindowUnderflow,
)
from .model import (
    BoxSet,
    InfoVector,
    NoiseSpec,
    SystemModel,
    Trajectory,
    build_info_vector,
    encode_features,
    sample_truncated_gaussian,
    simulate_trajectory,
)
from .mhe_core import (
    ArrivalCost,
    MheInstance,
    PrimalSolution,
    build_solution,
    kalman_step,
    make_instance,
    mhe_cost,
    phase1_feasible,
    riccati_update,
    solve_primal,
    stationary_arrival_weight,
)
from .dual_core import (
    DualSolution,
    ScaledSets,
    adjoint_lambda,
    dual_function,
    dual_gradient,
    project_half,
    recover_primal,
    solve_dual,
)
from .approximator import (
    Dataset,
    MlpParams,
    SamplerConfig,
    TrainConfig,
    forward,
    gen_dataset,
    grad,
    init_mlp,
    load_params,
    sample_instance,
    save_params,
    train,
)
from .certify import (
    CertBudget,
    PdMheRuntime,
    StepResult,
    VerificationReport,
    clamp_primal,
    instance_stream,
    min_sample_size,
    mlp_dual_estimator,
    mlp_primal_estimator,
    online_gap_check,
    oracle_dual_estimator,
    oracle_primal_estimator,
    pd_mhe_step,
    verify_dual,
    verify_primal,
    violation_budget,
    zero_dual_estimator,
    zero_primal_estimator,
)
from .stability import (
    AuditReport,
    StabilityCert,
    audit_trajectory,
    save_audit_report,
    build_stability_cert,
    error_bound,
    generalized_eig_max,
    lambda_max_over_sequence,
    lmi_check,
    rho_and_min_horizon,
    weighted_norm,
)
from .runtime import (
    BenchSetup,
    armse,
    example_system,
    rmse_bands,
    rmse_per_step,
    run_benchmark,
    run_certified,
    run_kalman,
    stable_variant,
    summarize_benchmark,
)

__version__ = "0.1.0"
