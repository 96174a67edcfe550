"""Desk-scale CLIP-style alignment of 3D volumes and template sentences, in numpy."""

from . import autodiff
from .autodiff import Tensor, backward, no_grad
from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from .contrastive import AccumulationPlan, Temperature, accumulated_step, clip_loss, full_batch_step
from .encoders import encode_image, encode_images, encode_text, encode_texts, init_params
from .errors import (
    ContractError,
    DimensionError,
    DivergenceError,
    DomainError,
    LoadError,
    NondeterminismError,
)
from .model import CLIPModel
from .pretrain import PretrainConfig, pretrain_mae
from .synthdata import (
    AugmentConfig,
    DataConfig,
    Dataset,
    augment,
    extract_patch,
    generate_case,
    generate_cases,
    preprocess,
    read_dataset,
    split_dataset,
    write_dataset,
)
from .text import (
    REGIONS,
    Region,
    TabularRecord,
    Vocabulary,
    build_vocab,
    record_to_sentence,
    region_prompt,
    tokenize,
)
from .trainer import AdamW, TrainConfig, build_model, load_model, lr_schedule, train
from .zeroshot import (
    auc_ovr,
    classify_zero_shot,
    evaluate,
    random_baseline,
    retrieval_metrics,
    retrieve,
)

__version__ = "0.1.0"
