"""Discrete factor-graph inference with trainable message passing.

The library estimates log partition functions three ways: exactly (brute
force or variable elimination), with damped loopy sum-product and the Bethe
free energy, and with learned message-passing models initialized to exact
sum-product behavior and trained against exact labels.
"""

from .autodiff import AdamState, Parameter, Tape, Tensor, adam_step, backward, clip_gradients
from .estimators import BetheApproximator, BpnnRegressor, build_bpnn
from .exact import (
    ExactResult,
    brute_force_ln_z,
    brute_force_model_count,
    min_degree_order,
    variable_elimination_ln_z,
)
from .generators import (
    CnfFormula,
    DimacsError,
    SbmSample,
    cnf_to_factor_graph,
    fix_variable,
    marginals_from_partitions,
    parse_dimacs,
    random_cnf,
    random_factor_graph,
    random_tree_graph,
    sample_ising_grid,
    sample_sbm,
)
from .graphs import (
    LOG_ZERO,
    Factor,
    FactorDecl,
    FactorGraph,
    FactorGraphError,
    Isomorphism,
    VariableDecl,
    apply_isomorphism,
    build_factor_graph,
    compose_isomorphisms,
    graph_from_dict,
    graph_to_dict,
    identity_isomorphism,
    inverse_isomorphism,
    load_graph_json,
    random_isomorphism,
    save_graph_json,
    tree_height,
)
from .layers import (
    BpnnLayer,
    BpnnModel,
    DampingOperator,
    Mlp,
    TrajectoryHead,
    init_as_bp,
    load_checkpoint,
    run_to_convergence,
    save_checkpoint,
)
from .propagation import (
    BeliefSet,
    BetheTerms,
    BpConfig,
    BpResult,
    MessageState,
    bethe_free_energy,
    bethe_ln_z,
    bp_iteration,
    compute_beliefs,
    init_messages,
    run_bp,
)
from .training import (
    LabeledInstance,
    TrainConfig,
    TrainHistory,
    TrainingError,
    evaluate_rmse,
    load_dataset,
    load_manifest_entries,
    mse_loss,
    save_manifest,
    train,
    write_loss_csv,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "Parameter", "Tape", "Tensor", "adam_step", "backward",
    "clip_gradients",
    "ExactResult", "brute_force_ln_z", "brute_force_model_count",
    "min_degree_order", "variable_elimination_ln_z",
    "CnfFormula", "DimacsError", "SbmSample", "cnf_to_factor_graph",
    "fix_variable", "marginals_from_partitions", "parse_dimacs", "random_cnf",
    "random_factor_graph", "random_tree_graph", "sample_ising_grid", "sample_sbm",
    "LOG_ZERO", "Factor", "FactorDecl", "FactorGraph", "FactorGraphError",
    "Isomorphism", "VariableDecl", "apply_isomorphism", "build_factor_graph",
    "compose_isomorphisms", "graph_from_dict", "graph_to_dict",
    "identity_isomorphism", "inverse_isomorphism", "load_graph_json",
    "random_isomorphism", "save_graph_json", "tree_height",
    "BpnnLayer", "BpnnModel", "DampingOperator", "Mlp", "TrajectoryHead",
    "init_as_bp", "load_checkpoint", "run_to_convergence", "save_checkpoint",
    "BeliefSet", "BetheTerms", "BpConfig", "BpResult", "MessageState",
    "bethe_free_energy", "bethe_ln_z", "bp_iteration", "compute_beliefs",
    "init_messages", "run_bp",
    "LabeledInstance", "TrainConfig", "TrainHistory", "TrainingError",
    "evaluate_rmse", "load_dataset", "load_manifest_entries", "mse_loss",
    "save_manifest", "train", "write_loss_csv",
    "BetheApproximator", "BpnnRegressor", "build_bpnn",
    "__version__",
]
