"""ExNet: joint prediction and entity clustering with a gated mixture of experts."""

from .config import RunConfig, load_config
from .data import Dataset, EntityIndex, read_csv
from .model import AttributionReport, EmbedMlpModel, ExNetModel, extract_attributions
from .synthdata import generate, perfect_model_metrics
from .train import embed_mlp_train, exnet_train, fit

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "load_config", "Dataset", "EntityIndex", "read_csv", "AttributionReport",
    "EmbedMlpModel", "ExNetModel", "extract_attributions", "generate", "perfect_model_metrics",
    "exnet_train", "embed_mlp_train", "fit",
]
