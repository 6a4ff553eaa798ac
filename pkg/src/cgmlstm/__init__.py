"""Blood glucose forecasting with a stacked LSTM / bidirectional LSTM network.

Subpackages by concern:

- :mod:`cgmlstm.numerics` - activations, shape-checked products, seeded RNG
- :mod:`cgmlstm.network` - LSTM, Bi-LSTM and dense layers with backpropagation
- :mod:`cgmlstm.checkpoint` - model persistence and lineage
- :mod:`cgmlstm.pipeline` - CSV ingestion, gap repair, windows, splits
- :mod:`cgmlstm.synth` - synthetic CGM subjects
- :mod:`cgmlstm.training` - Adam, epoch loop, pre-train / fine-tune protocol
- :mod:`cgmlstm.metrics` - RMSE, CC, time lag, Fit, dataset summaries
- :mod:`cgmlstm.baselines` - ARI(p,d), linear SVR, zero-order hold
"""

__version__ = "0.1.0"

from .network import init_model, model_backward, model_forward, predict  # noqa: E402
from .pipeline import GlucoseSeries, Scaler, SubDataset, WindowSet  # noqa: E402
from .training import TrainConfig, finetune, pretrain_workflow, train  # noqa: E402

__all__ = [
    "GlucoseSeries",
    "Scaler",
    "SubDataset",
    "TrainConfig",
    "WindowSet",
    "finetune",
    "init_model",
    "model_backward",
    "model_forward",
    "predict",
    "pretrain_workflow",
    "train",
]
