"""Two-stage speaker diarization: a chunk-level attractor predictor joined
to a supervised recurrent clustering module, with a constrained K-means
baseline, a conversation simulator, and a collar-aware DER scorer."""

from .errors import (
    ConfigError,
    ConstraintViolationError,
    DataError,
    DiarizationError,
    InternalInvariantError,
    InvalidInputError,
    ParseError,
    TrainingDivergenceError,
)
from .features import (
    FeatureSequence,
    Waveform,
    compute_logmel,
    read_wav,
    splice_and_subsample,
    write_wav,
)
from .modelcore import ChunkPredictor, ChunkResult, EncoderConfig
from .clustering import RecurrentClusterer, decode_recording, oracle_decode
from .baseline import baseline_decode, cop_kmeans
from .datasim import MixtureRecipe, SyntheticVoiceCorpus, simulate_mixture
from .scoring import DERBreakdown, DiarizationHypothesis, Segment, der
from .pipeline import (
    DiarizationModel,
    infer_recording,
    load_checkpoint,
    save_checkpoint,
)
from .training import TrainConfig, train_clustering, train_predictor

__version__ = "0.1.0"
