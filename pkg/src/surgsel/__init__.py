"""Multi-task covariate selection for surgery-duration prediction.

Each surgeon (or operation type, or surgeon and operation-type pair) is a
task with its own linear model on log duration. A single rule maps the
task's training sample size to the covariate subset it uses, chosen by
minimizing an estimate of the prediction error averaged over tasks.
"""

from .baselines import fit_global, forward_select, lasso_fit, lasso_path
from .data import (
    REFERENCE_SCHEMA,
    CovariateSpec,
    Dataset,
    SurgeryRecord,
    TaskMode,
    eligibility_filter,
    ingest_csv,
    partition_tasks,
    temporal_split,
    write_csv,
)
from .errors import ConvergenceError, DataError, NumericalError, SurgselError
from .evaluation import EvaluationReport, emit_report, kernel_smooth, repeated_kfold, rmse_log
from .ols import DesignMatrix, OlsFit, fit_ols, leverages, loo_residuals, predict
from .pipeline import DEFAULT_SEED, PipelineConfig, evaluate, select
from .screening import drift_screen, mutual_information_rank, residual_filter
from .selection import (
    CandidateModel,
    MultiTaskFit,
    SelectionProblem,
    SelectionRule,
    all_subsets,
    best_subset_for_n,
    build_selection_rule,
    cp_statistic,
    fit_multitask,
    predict_batch,
    predict_multitask,
)
from .synthetic import GeneratorConfig, generate_dataset, oracle_risk

__version__ = "0.1.0"
