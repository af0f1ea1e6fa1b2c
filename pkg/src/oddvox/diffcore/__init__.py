"""Minimal reverse-mode tensor engine, layers, AdamW and checkpoints."""

from .checkpoint import FORMAT_TAG, load_checkpoint, save_checkpoint
from .functional import (
    bce_loss,
    conv3d,
    layer_norm,
    linear,
    mse_loss,
    softmax,
    sparse_matmul,
    take_flat,
    upsample_nearest3d,
)
from .layers import Conv3d, LayerNorm, Linear, Module, MultiHeadAttention, Parameter, TransformerEncoderLayer
from .optim import AdamW, AdamWState, LrSchedule, adamw_step
from .tensor import (
    Tensor,
    amax,
    as_tensor,
    concat,
    count_flops,
    default_dtype,
    get_default_dtype,
    matmul,
    no_grad,
    relu,
    sigmoid,
    sigmoid_np,
    stack,
)

__all__ = [
    "AdamW",
    "AdamWState",
    "Conv3d",
    "FORMAT_TAG",
    "LayerNorm",
    "Linear",
    "LrSchedule",
    "Module",
    "MultiHeadAttention",
    "Parameter",
    "Tensor",
    "TransformerEncoderLayer",
    "adamw_step",
    "amax",
    "as_tensor",
    "bce_loss",
    "concat",
    "conv3d",
    "count_flops",
    "default_dtype",
    "get_default_dtype",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "matmul",
    "mse_loss",
    "multi_head_attention",
    "no_grad",
    "relu",
    "save_checkpoint",
    "sigmoid",
    "sigmoid_np",
    "softmax",
    "sparse_matmul",
    "stack",
    "take_flat",
    "upsample_nearest3d",
]


def multi_head_attention(tokens, heads, head_dim, params):
    """Functional form: ``params`` is a :class:`MultiHeadAttention` instance."""
    if params.heads != heads or params.head_dim != head_dim:
        raise ValueError("params were built for a different head layout")
    return params(tokens)
