"""Multi-size grouped-conv feature extraction with adaptive channel gating.

A self-contained numerical stack: dense tensors with a reverse-mode tape,
the attention block itself, a small trainable backbone, dataset plumbing,
an SGD trainer, and a closed-form parameter/MAC analyzer.
"""

from .analyzer import (
    CostReport,
    LayerSpec,
    ThroughputResult,
    analyze,
    attention_block_cost,
    count_flops,
    count_params,
    grouping_cost_ratio,
    measure_throughput,
)
from .attention import (
    AttentionBlockConfig,
    AttentionBlockParams,
    AttentionLayerConfig,
    AttentionLayerParams,
    adaptive_select,
    da2net_backward,
    da2net_forward,
    default_block_config,
    diverse_extract_layer,
    init_block_params,
    validate_block_config,
)
from .backbone import (
    BackboneConfig,
    InsertionPoint,
    Network,
    build_backbone,
    forward_classify,
    insert_attention,
)
from .data import (
    AugmentSpec,
    Dataset,
    augment,
    compute_channel_stats,
    load_cifar100,
    load_converted,
    normalize,
    synth_dataset,
    write_converted,
)
from .errors import (
    ConfigError,
    Da2Error,
    FormatError,
    NumericError,
    OracleError,
    ShapeError,
    TapeError,
)
from .ops import (
    BatchNormParams,
    Conv2dParams,
    OpTape,
    backward,
    batch_norm,
    conv1d_channel,
    conv2d_grouped,
    global_avg_pool,
    linear,
    relu,
    sigmoid,
)
from .tensor import (
    Rng,
    Tensor,
    elementwise_scale_broadcast,
    finite_difference_gradient,
    tensor_create,
)
from .trainer import (
    OptimState,
    TrainConfig,
    cross_entropy,
    evaluate,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    sgd_step,
    train_loop,
)

__version__ = "0.1.0"
