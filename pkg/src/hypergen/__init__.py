"""Few-shot CNN weight generation with a Transformer, in numpy."""

from .cnn import CnnSpec, LayerSpec, cnn_forward
from .episodes import AugmentationSpec, DatasetIndex, Episode, open_dataset, sample_episode, synth_glyphs
from .generator import HyperTransformer, TransformerConfig
from .trainer import EpisodeConfig, EvalReport, TrainConfig, evaluate, meta_step, train

__all__ = [
    "AugmentationSpec", "CnnSpec", "DatasetIndex", "Episode", "EpisodeConfig", "EvalReport",
    "HyperTransformer", "LayerSpec", "TrainConfig", "TransformerConfig", "cnn_forward", "evaluate",
    "meta_step", "open_dataset", "sample_episode", "synth_glyphs", "train",
]
__version__ = "0.1.0"
