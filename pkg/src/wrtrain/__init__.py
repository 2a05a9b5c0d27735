"""Seq2seq continuation model with a representation-level relevance objective.

A small numpy autodiff engine drives a pre-LN Transformer encoder-decoder.
Fine-tuning combines teacher-forced cross-entropy with a cosine triplet loss
over [CLS]-pooled representations of (greedy continuation, true next
sentence, off-topic sentence). An unlikelihood baseline, a duplication-penalized
greedy decoder and the usual automatic metrics are included.
"""

from .autodiff import Tensor, backward, no_grad, precision
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import Triple, Vocab, build_vocab, gen_synthetic, load_triples
from .decoding import DecodeConfig, greedy_decode, greedy_decode_batch, penalize
from .eval import bleu1, distinct_n, evaluate, preference_accuracy, repeated_ngram_rate
from .losses import WRLossConfig, cosine_distance, triplet_cos, ul_loss, wr_loss
from .model import ModelConfig, Seq2SeqTransformer, parameter_count
from .training import TrainConfig, TrainingError, finetune_ul, finetune_wr, pretrain, resume

__version__ = "0.1.0"
