"""Minimal dense-tensor engine: reverse-mode autodiff, layers, Adam, and
binary checkpoints."""

from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    cross_entropy,
    default_dtype,
    dot,
    dropout_mask,
    exp_,
    grad_check,
    layer_norm,
    log_,
    log_softmax,
    masked_fill,
    matmul,
    mean_,
    mul,
    neg,
    parameter,
    pick,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    slice_,
    softmax,
    sub,
    sum_,
    take_rows,
    tanh_,
    transpose,
)
from .layers import (
    DecoderLayer,
    Embedding,
    EncoderLayer,
    FeedForward,
    GRUCell,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    PositionEmbedding,
    TransformerDecoder,
    TransformerEncoder,
    causal_mask,
    prefix_params,
)
from .optim import Adam, NonFiniteGradient
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, load_into, save_checkpoint
