"""Budget-constrained adaptive calling strategies over paid prediction services."""

from .catalog import (
    Service,
    ServiceCatalog,
    Strategy,
    deserialize_strategy,
    load_catalog,
    save_catalog,
    serialize_strategy,
    validate_strategy,
)
from .dataset import (
    AnnotatedDataset,
    AnnotatedSample,
    empirical_quantile,
    load_dataset,
    save_dataset,
    split,
)
from .errors import (
    CascadeError,
    DataFormatError,
    FingerprintMismatchError,
    FormatVersionError,
    InfeasibleBudgetError,
    StructureError,
    ValidationError,
)
from .estimation import (
    EstimatedModel,
    base_accuracy,
    escalation_fraction,
    estimate_model,
    psi,
    r_tilde,
)
from .executor import (
    EvaluationReport,
    ExecutionTrace,
    TradeoffPoint,
    baseline_majority_vote,
    baseline_single,
    exact_replay_expectation,
    execute_query,
    replay_evaluate,
    replay_evaluate_strict,
    sweep,
    tradeoff_csv,
)
from .master import (
    MasterSolution,
    SolverConfig,
    assemble_strategy,
    predict_performance,
    solve_master,
    train,
)
from .oracle import (
    CorpusSpec,
    OracleResult,
    brute_force_optimal,
    bundled_demo_corpus,
    bundled_demo_spec,
    generate_synthetic_corpus,
)
from .subproblem import (
    Allocation,
    GFunction,
    LabelSolution,
    allocate_label_budgets,
    build_g_function,
    solve_fixed_base_label,
)

__version__ = "0.1.0"
