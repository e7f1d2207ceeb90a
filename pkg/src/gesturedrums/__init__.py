"""gesturedrums: turn rhythmic sound gestures into drum audio.

The pipeline: tokenize audio with a small residual-VQ codec, train a masked
transformer conditioned on band-reduced rhythm features, then generate audio
that follows a rhythm prompt in the timbre of an audio prefix prompt.
"""

from .dsp import AudioClip, AugmentFlags, augment, load_wav, mel_spectrogram, mfcc_timeavg, save_wav
from .rhythm import RhythmFeatureMatrix, BandSplit, adaptive_split, extract, fixed_split
from .codec import CodecConfig, ResidualVQCodec, SyntheticCodec, TokenGrid, train_codec
from .model import MaskedDrumTransformer, ModelConfig, ModelInput, init_model, parameter_count
from .schedule import (
    GenerationConfig,
    MaskPlan,
    cfg_combine,
    confirm_counts,
    cosine_ratio,
    rank_confidence,
    sample_training_mask,
)
from .training import TrainConfig, TrainStepRecord, make_example, masked_loss, train_loop
from .inference import GenerationRequest, GenerationTrace, build_buffer, generate, resume_trace
from .metrics import EmbeddingSet, OnsetList, detect_onsets, kad, mfcc_cosine, onset_f1
from .config import PipelineConfig, load_config, save_config

__version__ = "0.1.0"
