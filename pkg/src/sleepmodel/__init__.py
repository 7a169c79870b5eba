"""Sleep-stage sequence models (n-gram and LSTM) and fused beam-search decoding."""

from .core import (
    Hypnogram,
    SequenceModel,
    SleepStage,
    UniformModel,
    ZeroProbabilityError,
    accuracy,
    cohen_kappa,
    perplexity,
)
from .decoder import DecoderConfig, beam_decode, greedy_decode, sweep
from .kernels import BACKEND
from .neural import LstmSlm, TrainConfig, lstm_gradient_check, lstm_step, train_lstm
from .ngram import NgramModel, ngram_prob, train_ngram
from .simulator import (
    EmissionModel,
    HigherOrderSource,
    MarkovChain,
    emit_likelihoods,
    entropy_rate_perplexity,
    sample_hypnogram,
    table1_chain,
)

__version__ = "0.1.0"
