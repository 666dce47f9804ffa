"""Two-stage unknown-intent detection.

Stage one trains a bidirectional LSTM intent classifier whose margin-based
cosine objective yields compact, well-separated sentence features; stage two
flags test utterances whose local density deviates from the training
distribution and assigns the rest to a known class.
"""

from .corpus import (Corpus, EmbeddingTable, Utterance, build_embeddings,
                     encode_batch, load_corpus, tokenize)
from .detector import (Decision, DetectionConfig, FittedLof, UNKNOWN,
                       decide_doc, decide_lof, decide_msp, doc_fit, lof_fit,
                       lof_score, lof_score_batch)
from .encoder import (EncoderParams, FeatureMatrix, LstmCellParams, backward,
                      class_scores, forward, init_encoder, load_checkpoint,
                      save_checkpoint)
from .evaluation import (UNKNOWN_LABEL, ExperimentReport, SplitPlan, macro_f1,
                         plan_split, run_experiment, sample_known_classes)
from .losses import LmclConfig, LossOutput, lmcl, sigmoid_bce, softmax_ce
from .trainer import TrainConfig, TrainReport, extract_features, train

__version__ = "0.1.0"
