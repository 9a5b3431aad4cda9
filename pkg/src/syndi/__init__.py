"""Synthetic-data integration of external prediction models into an expanded GLM."""

__version__ = "0.1.0"

from .datamodel import (  # noqa: F401
    INTERNAL_POP,
    CenteringRecord,
    CoefficientModel,
    Column,
    Dataset,
    ExternalModelSpec,
    PredictorModel,
    TargetModelSpec,
    center,
    centering_record,
    center_with,
    dataset_from_arrays,
    default_replication,
    intercepts_and_slopes,
    intercepts_only,
    load_dataset,
    load_schema,
    uncenter,
    validate_spec,
    write_dataset,
)
from .glm import DesignMatrix, GlmFit, build_design, fit_glm, fit_internal, predict_glm  # noqa: F401
from .synth import CombinedDataset, SubprocessPredictor, combine, generate_synthetic_population  # noqa: F401
from .impute import ImputationStrategy, StackedDataset, impute_stack, monotone_order, write_stacked_csv  # noqa: F401
from .calibrate import (  # noqa: F401
    NuisanceBgivenX,
    PopulationEstimates,
    approximate_beta_syn,
    compute_weights,
    correct_linear,
    correct_logistic,
    fit_nuisance,
    initial_estimates,
)
from .estimate import (  # noqa: F401
    FitResult,
    PipelineConfig,
    bootstrap_variance,
    rubin_pool,
    run_comparison,
    run_direct,
    run_syndi,
    run_syndi_with_bootstrap,
)
from .metrics import MetricReport, auc, evaluate, scaled_brier, sse  # noqa: F401
