"""rollcast: rolling-origin benchmark engine for regional epidemic forecasting."""

from .forecasters import (
    AR1Forecaster,
    DLinearForecaster,
    FittedModel,
    GraphLinearForecaster,
    ModelSpec,
    NaiveForecaster,
    TrainConfig,
    fit_ar1,
    forecast_dlinear,
    forecast_graph_linear,
    naive_forecast,
    predict,
    train,
)
from .graph import AdjacencyMatrix, MixingOperator, load_adjacency, mix, row_normalize
from .metrics import (
    FilterMask,
    ForecastRecord,
    IntervalEstimate,
    MetricSet,
    bootstrap_by_month,
    build_filter_mask,
    filtered_metrics,
    mean_signed_error,
    meta_across_horizons,
    point_metrics,
    win_rate,
)
from .outbreaks import AnnotationSet, OutbreakInterval, annotate_rising, load_annotations, stratify
from .panel import (
    PanelDataset,
    PopulationVector,
    Sample,
    chrono_split,
    load_panel,
    load_population,
    make_samples,
    save_panel,
)
from .patches import (
    EinnConfig,
    EpiConfig,
    EpiRates,
    FilterConfig,
    PatchConfig,
    SirState,
    TidConfig,
    TidHead,
    apply_tid,
    einn_objective,
    epi_regularized_loss,
    filtered_loss,
    init_sir_states,
    ngm_propagate,
    rate_head,
    sir_percent,
    sir_rollout,
)

__version__ = "0.1.0"
