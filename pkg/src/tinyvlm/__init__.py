"""Desk-scale toolkit for training small text-only and multimodal decoder
language models, merging their parameters by linear interpolation, and
evaluating checkpoints on zero-shot benchmarks."""

from .corpus import (
    Batch,
    CaptionSample,
    TextSample,
    count_words,
    load_caption_corpus,
    load_text_corpus,
    make_batches,
    split_train_val,
)
from .features import PLACEHOLDER_KEY, FeatureStore, get_feature, open_store, write_store
from .model import (
    ModelConfig,
    ParameterSet,
    forward,
    init_model,
    paper_config,
    project_image,
    sentence_logprob,
    shape_manifest,
)
from .checkpoint import CheckpointMeta, load_checkpoint, save_checkpoint
from .merging import merge, merge_sweep, validate_compatibility
from .trainer import (
    SCHEDULE_THRESHOLDS,
    OptimizerState,
    ScheduleState,
    TrainConfig,
    adamw_step,
    cross_entropy_loss,
    estimate_words,
    schedule_crossings,
    train,
)
from .tokenizer import TokenizerModel, decode, encode, train_bpe, word_subword_ratio
from .evals import (
    EvalReport,
    ModelScorer,
    eval_correlation,
    eval_minimal_pairs,
    eval_multiple_choice,
    eval_winoground,
    spearman,
)

__version__ = "0.1.0"
