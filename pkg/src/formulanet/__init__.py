"""Formula-specified fully-connected neural networks for tabular data."""

__version__ = "0.1.0"

from .network import Network, NetworkConfig, init_network  # noqa: E402
from .objective import LossSpec  # noqa: E402
from .tabular import DataTable, build_design, parse_formula, read_csv  # noqa: E402
from .training import (  # noqa: E402
    FittedModel,
    TrainConfig,
    continue_training,
    fit,
    model_from_network,
    predict,
    residuals,
)
from .interpret import (  # noqa: E402
    accumulated_local_effects,
    avg_conditional_effects,
    partial_dependence,
    permutation_importance,
    summarize,
)
from .persist import load_model, save_model  # noqa: E402

__all__ = [
    "DataTable", "FittedModel", "LossSpec", "Network", "NetworkConfig", "TrainConfig",
    "accumulated_local_effects", "avg_conditional_effects", "build_design",
    "continue_training", "fit", "init_network", "load_model", "model_from_network",
    "parse_formula", "partial_dependence", "permutation_importance", "predict",
    "read_csv", "residuals", "save_model", "summarize",
]
