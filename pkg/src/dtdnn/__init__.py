"""Deformable time-delay neural network layers with analytic gradients."""

__version__ = "0.1.0"

from .core import UsageError, interpolate, interpolate_grad, make_rng, read_padded
from .layers import (
    ClipMode,
    ConvParams,
    DeformableTDNNLayer,
    GridSpec,
    OffsetPredictor,
    TDNNLayer,
    clip_offsets,
    deformable_backward,
    deformable_forward,
    deformable_layer_apply,
    offset_predict,
    param_count,
    tdnn_backward,
    tdnn_forward,
)
from .network import (
    LayerSpec,
    Network,
    NetworkConfig,
    build_network,
    load_checkpoint,
    load_config,
    save_checkpoint,
    table1_config,
)
