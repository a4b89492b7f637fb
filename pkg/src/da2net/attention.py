"""The diverse-extraction / adaptive-selection attention block.

A block is a short chain of layers. Each layer first runs a channel-preserving
grouped convolution (odd filter size, "same" padding) through batch norm and a
sigmoid — the diverse extraction — then pools the result to one descriptor per
channel, slides a shared odd-width kernel across the channel axis, and squashes
through a second sigmoid to produce per-channel gates in (0, 1). The gates
multiply the extracted map, and the gated map feeds the next layer. Filter
sizes grow (or stay equal) along the chain so later layers see wider effective
receptive fields. Output shape always equals input shape, which is what lets a
block drop into any point of a host network.
"""

from __future__ import annotations

from collections.abc import Mapping, MutableMapping
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from . import ops
from .ops import BatchNormParams, Conv2dParams, OpTape
from .tensor import Rng, Tensor, elementwise_scale_broadcast

__all__ = [
    "AttentionLayerConfig",
    "AttentionBlockConfig",
    "AttentionLayerParams",
    "AttentionBlockParams",
    "validate_block_config",
    "default_block_config",
    "init_block_params",
    "diverse_extract_layer",
    "adaptive_select",
    "da2net_forward",
    "da2net_backward",
    "watch_block",
    "block_state_items",
    "assemble_block_params",
    "write_back_buffers",
]

VALID_FILTER_SIZES = (3, 5, 7, 9)
VALID_ALPHAS = tuple(range(3, 16, 2))
VALID_GROUP_RATIOS = (1, 2, 4, 8, 16)
MAX_LAYERS = 4
POINTWISE_REDUCTION = 16


@dataclass(frozen=True)
class AttentionLayerConfig:
    """One layer: filter size n, channels-per-group g, gate neighborhood alpha."""

    n: int
    g: int = 1
    alpha: int = 9
    use_pointwise_reduction: bool = False


@dataclass(frozen=True)
class AttentionBlockConfig:
    """Ordered layer configs; filter sizes must not decrease along the chain.

    ``adaptive=False`` disables the gating stage (ablation switch): each layer
    then passes its extracted map through unchanged.
    """

    layers: tuple[AttentionLayerConfig, ...]
    enforce_ascending: bool = True
    adaptive: bool = True

    @classmethod
    def from_sizes(cls, sizes, g: int = 1, alpha: int = 9, **kwargs) -> "AttentionBlockConfig":
        layers = tuple(AttentionLayerConfig(n=int(n), g=g, alpha=alpha) for n in sizes)
        return cls(layers=layers, **kwargs)


def default_block_config() -> AttentionBlockConfig:
    """The best-performing configuration: sizes 3->5->7, g=1, alpha=9."""
    return AttentionBlockConfig.from_sizes((3, 5, 7), g=1, alpha=9)


def validate_block_config(cfg: AttentionBlockConfig, channels: int) -> AttentionBlockConfig:
    """Check every layer against the documented bounds for a given channel count.

    Returns the config unchanged when valid; raises :class:`ConfigError`
    naming the violated constraint otherwise.
    """
    if not cfg.layers:
        raise ConfigError("a block needs at least 1 layer")
    if len(cfg.layers) > MAX_LAYERS:
        raise ConfigError(f"a block has at most {MAX_LAYERS} layers; got {len(cfg.layers)}")
    for i, layer in enumerate(cfg.layers):
        if layer.n not in VALID_FILTER_SIZES:
            raise ConfigError(
                f"n must satisfy n=2x+1, 1<=x<=4 (n in {{3,5,7,9}}); layer {i} has n={layer.n}")
        if layer.alpha not in VALID_ALPHAS:
            raise ConfigError(
                f"alpha must satisfy alpha=2y+1, 1<=y<=7 (alpha in {{3,5,...,15}}); "
                f"layer {i} has alpha={layer.alpha}")
        if layer.g not in VALID_GROUP_RATIOS:
            raise ConfigError(
                f"g must be one of {{1,2,4,8,16}}; layer {i} has g={layer.g}")
        if channels % layer.g != 0:
            raise ConfigError(
                f"g={layer.g} does not divide the channel count C={channels} (layer {i})")
    if cfg.enforce_ascending:
        sizes = [layer.n for layer in cfg.layers]
        if any(a > b for a, b in zip(sizes, sizes[1:])):
            raise ConfigError(f"filter sizes must be non-decreasing; got {tuple(sizes)}")
    return cfg


@dataclass
class AttentionLayerParams:
    """Learnables of one layer: the grouped conv + BN pair and the gate kernel.

    The pointwise-reduction variant (comparison configuration only) swaps the
    grouped conv for a 1x1 squeeze/expand pair around a ReLU.
    """

    conv: Conv2dParams | None
    bn: BatchNormParams
    select_kernel: Tensor
    pw_reduce: Conv2dParams | None = None
    pw_expand: Conv2dParams | None = None


@dataclass
class AttentionBlockParams:
    cfg: AttentionBlockConfig
    channels: int
    layers: list[AttentionLayerParams] = field(default_factory=list)


def _he_normal(rng: Rng, shape, fan_in: int, dtype) -> Tensor:
    return Tensor(rng.normal(shape, 0.0, float(np.sqrt(2.0 / fan_in)), dtype=dtype))


def init_block_params(cfg: AttentionBlockConfig, channels: int, rng: Rng,
                      dtype="f32") -> AttentionBlockParams:
    """Fan-in normal init for all weights; BN starts as the identity transform."""
    validate_block_config(cfg, channels)
    block = AttentionBlockParams(cfg=cfg, channels=channels)
    for layer in cfg.layers:
        if layer.use_pointwise_reduction:
            mid = max(channels // POINTWISE_REDUCTION, 1)
            pw_reduce = Conv2dParams(
                weight=_he_normal(rng, (mid, channels, 1, 1), channels, dtype))
            pw_expand = Conv2dParams(
                weight=_he_normal(rng, (channels, mid, 1, 1), mid, dtype))
            conv = None
        else:
            pw_reduce = pw_expand = None
            groups = channels // layer.g
            fan_in = layer.g * layer.n * layer.n
            conv = Conv2dParams(
                weight=_he_normal(rng, (channels, layer.g, layer.n, layer.n), fan_in, dtype),
                groups=groups, stride=1, padding=(layer.n - 1) // 2)
        bn = BatchNormParams(
            gamma=Tensor(np.ones(channels), dtype=dtype),
            beta=Tensor(np.zeros(channels), dtype=dtype))
        kernel = _he_normal(rng, (layer.alpha,), layer.alpha, dtype)
        block.layers.append(AttentionLayerParams(
            conv=conv, bn=bn, select_kernel=kernel,
            pw_reduce=pw_reduce, pw_expand=pw_expand))
    return block


def diverse_extract_layer(z: Tensor, params: AttentionLayerParams, mode: str,
                          tape: OpTape | None = None) -> Tensor:
    """Grouped conv -> batch norm -> sigmoid; shape preserved exactly."""
    if params.conv is not None:
        y = ops.conv2d_grouped(z, params.conv, tape)
    else:
        y = ops.conv2d_grouped(z, params.pw_reduce, tape)
        y = ops.relu(y, tape)
        y = ops.conv2d_grouped(y, params.pw_expand, tape)
    y = ops.batch_norm(y, params.bn, mode, tape)
    return ops.sigmoid(y, tape)


def adaptive_select(zd: Tensor, params: AttentionLayerParams,
                    tape: OpTape | None = None) -> Tensor:
    """Per-channel gates in (0, 1): pool -> shared 1-D kernel -> sigmoid."""
    pooled = ops.global_avg_pool(zd, tape)
    mixed = ops.conv1d_channel(pooled, params.select_kernel, tape=tape)
    return ops.sigmoid(mixed, tape)


def da2net_forward(z: Tensor, block: AttentionBlockParams, mode: str,
                   tape: OpTape | None = None) -> Tensor:
    """Run the full layer chain; each layer gates its own extracted map."""
    validate_block_config(block.cfg, z.shape[1])
    out = z
    for layer in block.layers:
        zd = diverse_extract_layer(out, layer, mode, tape)
        if block.cfg.adaptive:
            za = adaptive_select(zd, layer, tape)
            gates = ops.reshape(za, (za.shape[0], za.shape[1], 1, 1), tape)
            out = elementwise_scale_broadcast(zd, gates, tape)
        else:
            out = zd
    return out


def da2net_backward(tape: OpTape, loss_grad: float = 1.0) -> dict[str, Tensor]:
    """Gradients of a taped block computation for every watched parameter."""
    return ops.backward(tape, loss_grad)


def _layer_param_items(j: int, layer: AttentionLayerParams):
    if layer.conv is not None:
        yield f"l{j}.conv.w", layer.conv.weight
    else:
        yield f"l{j}.pw_reduce.w", layer.pw_reduce.weight
        yield f"l{j}.pw_expand.w", layer.pw_expand.weight
    yield f"l{j}.bn.gamma", layer.bn.gamma
    yield f"l{j}.bn.beta", layer.bn.beta
    yield f"l{j}.select.k", layer.select_kernel


def block_state_items(block: AttentionBlockParams, prefix: str = ""):
    """Flatten a block into (params, buffers) name->tensor dicts."""
    params: dict[str, Tensor] = {}
    buffers: dict[str, Tensor] = {}
    for j, layer in enumerate(block.layers):
        for name, t in _layer_param_items(j, layer):
            params[prefix + name] = t
        buffers[f"{prefix}l{j}.bn.rmean"] = layer.bn.running_mean
        buffers[f"{prefix}l{j}.bn.rvar"] = layer.bn.running_var
    return params, buffers


def watch_block(tape: OpTape, block: AttentionBlockParams, prefix: str = "") -> None:
    params, _ = block_state_items(block, prefix)
    for name, t in params.items():
        tape.watch(name, t)


def assemble_block_params(cfg: AttentionBlockConfig, channels: int,
                          params: Mapping[str, Tensor], buffers: Mapping[str, Tensor],
                          prefix: str = "") -> AttentionBlockParams:
    """Rebuild the layer structs from flat state dicts (inverse of flattening)."""
    block = AttentionBlockParams(cfg=cfg, channels=channels)
    for j, layer in enumerate(cfg.layers):
        if layer.use_pointwise_reduction:
            conv = None
            pw_reduce = Conv2dParams(weight=params[f"{prefix}l{j}.pw_reduce.w"])
            pw_expand = Conv2dParams(weight=params[f"{prefix}l{j}.pw_expand.w"])
        else:
            pw_reduce = pw_expand = None
            conv = Conv2dParams(
                weight=params[f"{prefix}l{j}.conv.w"],
                groups=channels // layer.g, stride=1, padding=(layer.n - 1) // 2)
        bn = BatchNormParams(
            gamma=params[f"{prefix}l{j}.bn.gamma"],
            beta=params[f"{prefix}l{j}.bn.beta"],
            running_mean=buffers[f"{prefix}l{j}.bn.rmean"],
            running_var=buffers[f"{prefix}l{j}.bn.rvar"])
        block.layers.append(AttentionLayerParams(
            conv=conv, bn=bn, select_kernel=params[f"{prefix}l{j}.select.k"],
            pw_reduce=pw_reduce, pw_expand=pw_expand))
    return block


def write_back_buffers(block: AttentionBlockParams, buffers: MutableMapping[str, Tensor],
                       prefix: str = "") -> None:
    """Store the (possibly updated) BN running statistics back into a state dict."""
    for j, layer in enumerate(block.layers):
        buffers[f"{prefix}l{j}.bn.rmean"] = layer.bn.running_mean
        buffers[f"{prefix}l{j}.bn.rvar"] = layer.bn.running_var
