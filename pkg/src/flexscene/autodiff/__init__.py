from .tensor import (
    DiffArray,
    MaskError,
    ShapeError,
    concat,
    cross_entropy,
    embedding,
    exp,
    gelu,
    layer_norm,
    log,
    masked_softmax,
    matmul,
    no_grad,
    relu,
    tanh,
)
from .nn import (
    Block,
    CrossBlock,
    Embedding,
    LayerNorm,
    Linear,
    MLP,
    Module,
    MultiHeadAttention,
    Parameter,
    attention,
)
from .optim import AdamW, ConfigError, lr_schedule
from .gradcheck import gradcheck, numeric_grad
