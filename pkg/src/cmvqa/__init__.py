"""Compositional-memory visual question answering on numpy.

The hot cell kernels come from a compiled extension when it is built and
from a numpy fallback otherwise; see :mod:`cmvqa.kernels`.
"""

from . import kernels
from .cells import (AlphaGateParams, CompositionalMemory, CompositionalMemoryState, LSTMParams,
                    RegionLSTMParams, alpha_gate, compositional_memory_step, episode_pool,
                    lstm_step, region_lstm_step)
from .data import (FeatureRecord, QAExample, ToyTaskConfig, Vocabulary, build_vocab,
                   generate_toy_dataset, parse_manifest, read_features, read_word_vectors, tokenize,
                   write_features)
from .errors import (CMVQAError, ConfigError, DimensionError, FormatError, NumericalError,
                     ProtocolError, TapeError, VocabularyError)
from .evaluation import (EvalReport, Taxonomy, consensus_scores, exact_accuracy,
                         wup_similarity, wups_score)
from .model import (NetworkConfig, VQANetwork, embed, forward, masked_loss, predict_answer)
from .numerics import Parameter, Tape, Tensor, backward, elementwise, linear_map
from .train import (SGD, TrainConfig, grad_check, load_checkpoint, run_training,
                    save_checkpoint, teacher_force)

__version__ = "0.1.0"
