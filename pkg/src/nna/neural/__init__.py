from . import engine
from .engine import (
    Tape,
    Value,
    backward,
    constant,
    finite_difference_check,
    grad,
    no_grad,
    set_check_finite,
    set_default_dtype,
    variable,
)
from .layers import (
    AttentionHead,
    Dense,
    MLP,
    Module,
    Parameter,
    positional_encoding,
    positional_encoding_dim,
    scaled_dot_attention,
)
from .conv import ConvEncoder, bilinear_upsample, conv2d, sample_bilinear
from .graph import GraphNet, MeshGraph
from .optim import AdamState, adam_step
