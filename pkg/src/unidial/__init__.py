"""Multi-party dialogue pre-training stack at desk scale."""

from .batching import Batch, PackedSample, build_prefix_mask, group_by_length, pack
from .corpus import CommentNode, DialogueSample, MessageTree, assign_roles, build_trees, clean, extract_samples
from .inference import DecodeConfig, distinct_n, generate, perplexity, self_chat
from .model import ModelConfig, ModelParameters, backward, embed, forward, init_params, nll_loss
from .tokenizer import Vocabulary, decode, encode, train_bpe
from .training import OptimizerState, Schedule, TrainRunConfig, adam_step, lr_at, train

__version__ = "0.1.0"
