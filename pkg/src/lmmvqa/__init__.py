"""Video quality assessment by instruction-tuned multimodal decoding."""
from .decoder import QualityPrediction, Vocabulary, parse_answer
from .encoders import (
    EncodedVideo,
    SpatialFeatures,
    TemporalFeatures,
    VideoFeatureExtractor,
    encode_spatial,
    encode_temporal,
    register_backend,
    resolve_backend,
)
from .estimator import LMMVQARegressor
from .evaluation import EvalReport, kfold_split, plcc, run_protocol, srcc
from .preprocess import ChunkSet, FrameSequence, KeyFrameSet, VideoPreprocessor, load_video, select_key_frames, slice_chunks
from .prompting import DatasetManifest, QAInstruction, bucket_levels, generate_templates, read_manifest
from .training import Checkpoint, TrainConfig, train

__version__ = "0.1.0"
