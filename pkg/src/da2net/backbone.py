"""Small staged CNN with registered attention insertion points.

The layout is the classic small-image recipe: a 3x3 stem, a few stages of
plain or residual blocks where every stage after the first halves the spatial
extent, then global average pooling and a linear classifier. The output of
each stage is a registered insertion point; attention blocks splice in there
without changing any downstream shape.

A :class:`Network` owns flat ``params``/``buffers`` dicts keyed by dotted
layer paths; layer objects hold structure only and fetch their tensors at
forward time, so optimizers and checkpoints operate on plain dicts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attention import (
    AttentionBlockConfig,
    assemble_block_params,
    block_state_items,
    da2net_forward,
    init_block_params,
    validate_block_config,
    write_back_buffers,
)
from .errors import ConfigError, ShapeError
from . import ops
from .ops import BatchNormParams, Conv2dParams, OpTape
from .tensor import Rng, Tensor

__all__ = [
    "BackboneConfig",
    "Network",
    "InsertionPoint",
    "build_backbone",
    "insert_attention",
    "forward_classify",
]


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    blocks: tuple[int, ...] = (1, 1, 1)
    block_kind: str = "residual"  # "residual" | "plain"
    num_classes: int = 10
    in_channels: int = 3
    input_size: int = 32
    seed: int = 0
    attention: AttentionBlockConfig | None = None
    attention_policy: object = "all"  # "all" or sequence of insertion-point ordinals

    def __post_init__(self):
        if len(self.widths) != len(self.blocks):
            raise ConfigError(
                f"widths ({len(self.widths)}) and blocks ({len(self.blocks)}) "
                "must have equal length")
        if self.block_kind not in ("residual", "plain"):
            raise ConfigError(f"block_kind must be 'residual' or 'plain', got {self.block_kind!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")


@dataclass(frozen=True)
class InsertionPoint:
    """A stage boundary: insert before ``layer_index`` in the layer list."""

    layer_index: int
    channels: int
    spatial: int


def _he_weight(rng: Rng, shape, fan_in: int, dtype) -> Tensor:
    return Tensor(rng.normal(shape, 0.0, float(np.sqrt(2.0 / fan_in)), dtype=dtype))


class Conv2dLayer:
    def __init__(self, name, in_ch, out_ch, kernel, stride=1, padding=0, groups=1, bias=False):
        self.name = name
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding, self.groups = stride, padding, groups
        self.bias = bias

    def init(self, rng: Rng, params, buffers, dtype):
        fan_in = (self.in_ch // self.groups) * self.kernel * self.kernel
        params[f"{self.name}.w"] = _he_weight(
            rng, (self.out_ch, self.in_ch // self.groups, self.kernel, self.kernel),
            fan_in, dtype)
        if self.bias:
            params[f"{self.name}.b"] = Tensor(np.zeros(self.out_ch), dtype=dtype)

    def _params(self, net):
        return Conv2dParams(
            weight=net.params[f"{self.name}.w"],
            bias=net.params.get(f"{self.name}.b"),
            groups=self.groups, stride=self.stride, padding=self.padding)

    def forward(self, x, net, mode, tape):
        return ops.conv2d_grouped(x, self._params(net), tape)

    def out_shape(self, shape):
        c, h, w = shape
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        return (self.out_ch, ho, wo)


class BatchNormLayer:
    def __init__(self, name, ch, momentum=0.9, epsilon=1e-5):
        self.name, self.ch = name, ch
        self.momentum, self.epsilon = momentum, epsilon

    def init(self, rng: Rng, params, buffers, dtype):
        params[f"{self.name}.gamma"] = Tensor(np.ones(self.ch), dtype=dtype)
        params[f"{self.name}.beta"] = Tensor(np.zeros(self.ch), dtype=dtype)
        buffers[f"{self.name}.rmean"] = Tensor(np.zeros(self.ch), dtype=dtype)
        buffers[f"{self.name}.rvar"] = Tensor(np.ones(self.ch), dtype=dtype)

    def forward(self, x, net, mode, tape):
        p = BatchNormParams(
            gamma=net.params[f"{self.name}.gamma"],
            beta=net.params[f"{self.name}.beta"],
            running_mean=net.buffers[f"{self.name}.rmean"],
            running_var=net.buffers[f"{self.name}.rvar"],
            momentum=self.momentum, epsilon=self.epsilon)
        out = ops.batch_norm(x, p, mode, tape)
        if mode == "train":
            net.buffers[f"{self.name}.rmean"] = p.running_mean
            net.buffers[f"{self.name}.rvar"] = p.running_var
        return out

    def out_shape(self, shape):
        return shape


class ReLULayer:
    def __init__(self):
        self.name = "relu"

    def init(self, rng, params, buffers, dtype):
        pass

    def forward(self, x, net, mode, tape):
        return ops.relu(x, tape)

    def out_shape(self, shape):
        return shape


class ResidualBlock:
    """Two 3x3 conv+BN with a skip; 1x1 projection when shape changes."""

    def __init__(self, name, in_ch, out_ch, stride):
        self.name = name
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.conv1 = Conv2dLayer(f"{name}.conv1", in_ch, out_ch, 3, stride, 1)
        self.bn1 = BatchNormLayer(f"{name}.bn1", out_ch)
        self.conv2 = Conv2dLayer(f"{name}.conv2", out_ch, out_ch, 3, 1, 1)
        self.bn2 = BatchNormLayer(f"{name}.bn2", out_ch)
        self.project = stride != 1 or in_ch != out_ch
        if self.project:
            self.down_conv = Conv2dLayer(f"{name}.down", in_ch, out_ch, 1, stride, 0)
            self.down_bn = BatchNormLayer(f"{name}.down_bn", out_ch)

    def init(self, rng, params, buffers, dtype):
        self.conv1.init(rng, params, buffers, dtype)
        self.bn1.init(rng, params, buffers, dtype)
        self.conv2.init(rng, params, buffers, dtype)
        self.bn2.init(rng, params, buffers, dtype)
        if self.project:
            self.down_conv.init(rng, params, buffers, dtype)
            self.down_bn.init(rng, params, buffers, dtype)

    def forward(self, x, net, mode, tape):
        y = self.conv1.forward(x, net, mode, tape)
        y = self.bn1.forward(y, net, mode, tape)
        y = ops.relu(y, tape)
        y = self.conv2.forward(y, net, mode, tape)
        y = self.bn2.forward(y, net, mode, tape)
        if self.project:
            s = self.down_conv.forward(x, net, mode, tape)
            s = self.down_bn.forward(s, net, mode, tape)
        else:
            s = x
        return ops.relu(ops.add(y, s, tape), tape)

    def out_shape(self, shape):
        return self.bn2.out_shape(self.conv2.out_shape(self.conv1.out_shape(shape)))


class PlainBlock:
    """conv 3x3 -> BN -> ReLU, no skip."""

    def __init__(self, name, in_ch, out_ch, stride):
        self.name = name
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.conv = Conv2dLayer(f"{name}.conv", in_ch, out_ch, 3, stride, 1)
        self.bn = BatchNormLayer(f"{name}.bn", out_ch)

    def init(self, rng, params, buffers, dtype):
        self.conv.init(rng, params, buffers, dtype)
        self.bn.init(rng, params, buffers, dtype)

    def forward(self, x, net, mode, tape):
        y = self.conv.forward(x, net, mode, tape)
        y = self.bn.forward(y, net, mode, tape)
        return ops.relu(y, tape)

    def out_shape(self, shape):
        return self.bn.out_shape(self.conv.out_shape(shape))


class GapLayer:
    def __init__(self):
        self.name = "gap"

    def init(self, rng, params, buffers, dtype):
        pass

    def forward(self, x, net, mode, tape):
        return ops.global_avg_pool(x, tape)

    def out_shape(self, shape):
        return (shape[0],)


class LinearLayer:
    def __init__(self, name, in_f, out_f):
        self.name, self.in_f, self.out_f = name, in_f, out_f

    def init(self, rng, params, buffers, dtype):
        params[f"{self.name}.w"] = _he_weight(rng, (self.out_f, self.in_f), self.in_f, dtype)
        params[f"{self.name}.b"] = Tensor(np.zeros(self.out_f), dtype=dtype)

    def forward(self, x, net, mode, tape):
        return ops.linear(x, net.params[f"{self.name}.w"], net.params[f"{self.name}.b"], tape)

    def out_shape(self, shape):
        return (self.out_f,)


class AttentionBlockLayer:
    """A spliced-in attention block; a no-op while ``net.attention_enabled`` is off."""

    def __init__(self, name, cfg: AttentionBlockConfig, channels: int):
        self.name = name
        self.cfg = cfg
        self.channels = channels

    def init(self, rng, params, buffers, dtype):
        block = init_block_params(self.cfg, self.channels, rng, dtype=dtype)
        p, b = block_state_items(block, prefix=f"{self.name}.")
        params.update(p)
        buffers.update(b)

    def forward(self, x, net, mode, tape):
        if not net.attention_enabled:
            return x
        block = assemble_block_params(self.cfg, self.channels, net.params, net.buffers,
                                      prefix=f"{self.name}.")
        out = da2net_forward(x, block, mode, tape)
        if mode == "train":
            write_back_buffers(block, net.buffers, prefix=f"{self.name}.")
        return out

    def out_shape(self, shape):
        return shape


@dataclass
class Network:
    """Ordered layer graph plus flat parameter/buffer state."""

    layers: list
    params: dict[str, Tensor]
    buffers: dict[str, Tensor]
    insertion_points: list[InsertionPoint]
    config: BackboneConfig
    attention_enabled: bool = True
    dtype: str = "f32"

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def clone_state(self) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
        return dict(self.params), dict(self.buffers)

    def dry_run(self) -> tuple[int, ...]:
        """Shape-check the whole graph on a single zero batch (eval mode)."""
        c = self.config
        x = Tensor(np.zeros((1, c.in_channels, c.input_size, c.input_size), dtype=np.float32))
        out, _ = forward_classify(self, x, mode="eval")
        return out.shape

    def layer_shapes(self) -> list[tuple]:
        """Per-layer output shapes starting from the configured input size."""
        c = self.config
        shape = (c.in_channels, c.input_size, c.input_size)
        shapes = []
        for layer in self.layers:
            shape = layer.out_shape(shape)
            shapes.append(shape)
        return shapes


def build_backbone(cfg: BackboneConfig, dtype: str = "f32") -> Network:
    """Construct, initialize, and shape-check a staged classifier network."""
    rng = Rng(cfg.seed)
    layers: list = [
        Conv2dLayer("stem.conv", cfg.in_channels, cfg.widths[0], 3, 1, 1),
        BatchNormLayer("stem.bn", cfg.widths[0]),
        ReLULayer(),
    ]
    points: list[InsertionPoint] = []
    in_ch = cfg.widths[0]
    spatial = cfg.input_size
    block_cls = ResidualBlock if cfg.block_kind == "residual" else PlainBlock
    for i, (width, n_blocks) in enumerate(zip(cfg.widths, cfg.blocks)):
        for j in range(n_blocks):
            stride = 2 if (i > 0 and j == 0) else 1
            layers.append(block_cls(f"stage{i}.block{j}", in_ch, width, stride))
            in_ch = width
            spatial //= stride
        points.append(InsertionPoint(layer_index=len(layers), channels=width, spatial=spatial))
    layers.append(GapLayer())
    layers.append(LinearLayer("head.fc", cfg.widths[-1], cfg.num_classes))

    params: dict[str, Tensor] = {}
    buffers: dict[str, Tensor] = {}
    for layer in layers:
        layer.init(rng, params, buffers, dtype)
    names = list(params) + list(buffers)
    if len(set(names)) != len(names):
        raise ConfigError("duplicate parameter names in network")

    net = Network(layers=layers, params=params, buffers=buffers,
                  insertion_points=points, config=cfg, dtype=dtype)
    net.dry_run()
    if cfg.attention is not None:
        net = insert_attention(net, cfg.attention, cfg.attention_policy)
    return net


def insert_attention(net: Network, acfg: AttentionBlockConfig, policy="all",
                     rng: Rng | None = None) -> Network:
    """Splice attention blocks at the chosen insertion points.

    ``policy`` is ``"all"`` (every registered point) or a sequence of
    point ordinals. Returns a new Network; the input network and its tensors
    are untouched (parameter tensors are shared, both dicts are fresh).
    """
    if policy in ("all", "all-bottlenecks"):
        chosen = list(range(len(net.insertion_points)))
    else:
        chosen = [int(i) for i in policy]
        for i in chosen:
            if not 0 <= i < len(net.insertion_points):
                raise ConfigError(
                    f"insertion index {i} out of range; network has "
                    f"{len(net.insertion_points)} insertion points")
    for i in chosen:
        validate_block_config(acfg, net.insertion_points[i].channels)
    if rng is None:
        rng = Rng(net.config.seed, stream=0xA77)

    layers = list(net.layers)
    params, buffers = net.clone_state()
    # splice from the back so earlier registered indices stay valid
    for i in sorted(chosen, reverse=True):
        point = net.insertion_points[i]
        if any(k.startswith(f"att{i}.") for k in params):
            raise ConfigError(f"insertion point {i} already has an attention block")
        block_layer = AttentionBlockLayer(f"att{i}", acfg, point.channels)
        block_layer.init(rng.split(0xA770 + i), params, buffers, net.dtype)
        layers.insert(point.layer_index, block_layer)

    new_points = []
    for point in net.insertion_points:
        shift = sum(1 for j in chosen if net.insertion_points[j].layer_index <= point.layer_index)
        new_points.append(replace(point, layer_index=point.layer_index + shift))

    new_cfg = replace(net.config, attention=acfg, attention_policy=policy)
    out = Network(layers=layers, params=params, buffers=buffers,
                  insertion_points=new_points, config=new_cfg,
                  attention_enabled=net.attention_enabled, dtype=net.dtype)
    out.dry_run()
    return out


def forward_classify(net: Network, batch: Tensor, mode: str = "eval",
                     tape: OpTape | None = None, record: bool = True):
    """Run the network end to end; returns (logits, tape).

    Train mode records every primitive on a tape (created and parameter-watched
    here if not supplied) and updates BN running statistics; eval mode is
    deterministic and records only onto an explicitly supplied tape.
    ``record=False`` skips tape creation for gradient-free train-mode passes.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if batch.ndim != 4:
        raise ShapeError(f"batch must be NCHW, got shape {batch.shape}")
    if batch.shape[1] != net.config.in_channels:
        raise ShapeError(
            f"batch has {batch.shape[1]} channels, network expects {net.config.in_channels}")
    if mode == "train" and tape is None and record:
        tape = OpTape()
        for name, t in net.params.items():
            tape.watch(name, t)
    x = batch
    for layer in net.layers:
        x = layer.forward(x, net, mode, tape)
    return x, tape
