"""marrow: a desk-scale multi-stage text retrieval pipeline.

A causal-transformer bi-encoder retriever and pointwise reranker trained
from scratch with contrastive objectives, next to BM25 and exact flat-index
search, evaluated with TREC-style metrics.
"""

from .autodiff import Tape, Tensor
from .checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from .config import PipelineConfig, load_config
from .errors import (ConfigError, ContractError, DataError, DependencyError,
                     LengthError, MarrowError, NumericError, ShapeError)
from .evaluation import Run, evaluate_run, load_qrels, load_run, mrr_at_k, ndcg_at_k, recall_at_k
from .flatindex import FlatIndex, batch_search, build_flat_index, flat_search
from .lexical import InvertedIndex, bm25_search, build_inverted_index
from .model import (LoraAdapters, ModelConfig, ModelWeights, causal_forward, encode_text,
                    init_weights, merge_lora, score_head)
from .reranker import format_rerank_input, rerank, reranker_loss, score_pair, train_reranker
from .retriever import (EncoderTrainConfig, TrainBatch, TrainingExample, assemble_batch,
                        infonce_loss, mine_hard_negatives, train_retriever)
from .text import TokenSequence, Vocabulary, build_vocab, segment_maxp, tokenize

__version__ = "0.1.0"
