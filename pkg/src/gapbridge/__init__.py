"""Query-conditioned target sound extraction trained on audio-side embeddings
of a joint text/audio encoder, with embedding and signal manipulations that
bridge the text/audio modality gap.
"""
from .dsp import Waveform, si_sdr
from .embeddings import QueryEmbedding, ToyJointEncoder, ToyJointEncoderConfig
from .extractor import Extractor, ExtractorConfig
from .manip import ManipulationConfig
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Extractor",
    "ExtractorConfig",
    "ManipulationConfig",
    "QueryEmbedding",
    "ToyJointEncoder",
    "ToyJointEncoderConfig",
    "TrainConfig",
    "Waveform",
    "si_sdr",
    "train",
]
