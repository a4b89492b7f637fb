"""Network descriptions for the cost analyzer.

Descriptions are flat :class:`~da2net.analyzer.LayerSpec` lists. They come
from three sources: an instantiated :class:`~da2net.backbone.Network`, the
micro-backbone config (without instantiating), or the packaged full-size
bottleneck-ResNet description, which exists purely for analysis - its stages
are [3, 4, 6, 3] bottleneck blocks with widths 256/512/1024/2048 on a 3x3
stride-1 stem, the standard 32x32 adaptation.
"""

from __future__ import annotations

from .analyzer import LayerSpec
from .attention import POINTWISE_REDUCTION, AttentionBlockConfig, validate_block_config
from .backbone import (
    AttentionBlockLayer,
    BackboneConfig,
    BatchNormLayer,
    Conv2dLayer,
    GapLayer,
    LinearLayer,
    Network,
    PlainBlock,
    ReLULayer,
    ResidualBlock,
    build_backbone,
)
from .errors import ConfigError

__all__ = [
    "attention_block_specs",
    "network_specs",
    "backbone_specs",
    "resnet50_cifar_specs",
    "ANALYSIS_ONLY_PRESETS",
]

ANALYSIS_ONLY_PRESETS = ("resnet50_cifar",)


def attention_block_specs(prefix: str, channels: int, hw: tuple[int, int],
                          cfg: AttentionBlockConfig) -> list[LayerSpec]:
    """Rows of one attention block at a given insertion site."""
    validate_block_config(cfg, channels)
    rows: list[LayerSpec] = []
    for j, layer in enumerate(cfg.layers):
        base = f"{prefix}.l{j}"
        if layer.use_pointwise_reduction:
            mid = max(channels // POINTWISE_REDUCTION, 1)
            rows.append(LayerSpec(f"{base}.pw_reduce", "conv2d", in_ch=channels,
                                  out_ch=mid, kernel=1, hw=hw))
            rows.append(LayerSpec(f"{base}.relu", "act", out_ch=mid, hw=hw))
            rows.append(LayerSpec(f"{base}.pw_expand", "conv2d", in_ch=mid,
                                  out_ch=channels, kernel=1, hw=hw))
        else:
            rows.append(LayerSpec(f"{base}.conv", "conv2d", in_ch=channels,
                                  out_ch=channels, kernel=layer.n,
                                  groups=channels // layer.g, hw=hw))
        rows.append(LayerSpec(f"{base}.bn", "bn", out_ch=channels, hw=hw))
        rows.append(LayerSpec(f"{base}.sigmoid", "act", out_ch=channels, hw=hw))
        if cfg.adaptive:
            rows.append(LayerSpec(f"{base}.gap", "gap", out_ch=channels, hw=hw))
            rows.append(LayerSpec(f"{base}.select", "conv1d", out_ch=channels,
                                  alpha=layer.alpha))
            rows.append(LayerSpec(f"{base}.gate_sigmoid", "act", out_ch=channels,
                                  hw=(1, 1)))
            rows.append(LayerSpec(f"{base}.gate", "scale", out_ch=channels, hw=hw))
    return rows


def _conv_rows(layer: Conv2dLayer, in_shape) -> tuple[list[LayerSpec], tuple]:
    out_shape = layer.out_shape(in_shape)
    row = LayerSpec(layer.name, "conv2d", in_ch=in_shape[0], out_ch=layer.out_ch,
                    kernel=layer.kernel, groups=layer.groups, bias=layer.bias,
                    hw=out_shape[1:])
    return [row], out_shape


def network_specs(net: Network) -> list[LayerSpec]:
    """Describe an instantiated network, layer by layer with concrete shapes."""
    cfg = net.config
    shape = (cfg.in_channels, cfg.input_size, cfg.input_size)
    rows: list[LayerSpec] = []
    for layer in net.layers:
        rows_l, shape = _layer_rows(layer, shape)
        rows.extend(rows_l)
    return rows


def _layer_rows(layer, shape) -> tuple[list[LayerSpec], tuple]:
    if isinstance(layer, Conv2dLayer):
        return _conv_rows(layer, shape)
    if isinstance(layer, BatchNormLayer):
        return [LayerSpec(layer.name, "bn", out_ch=shape[0], hw=shape[1:])], shape
    if isinstance(layer, ReLULayer):
        return [LayerSpec("relu", "act", out_ch=shape[0], hw=shape[1:])], shape
    if isinstance(layer, (ResidualBlock, PlainBlock)):
        return _block_rows(layer, shape)
    if isinstance(layer, GapLayer):
        return [LayerSpec("gap", "gap", out_ch=shape[0], hw=shape[1:])], (shape[0],)
    if isinstance(layer, LinearLayer):
        row = LayerSpec(layer.name, "linear", in_features=layer.in_f,
                        out_features=layer.out_f, bias=True)
        return [row], (layer.out_f,)
    if isinstance(layer, AttentionBlockLayer):
        return attention_block_specs(layer.name, shape[0], shape[1:], layer.cfg), shape
    raise ConfigError(f"cannot describe layer type {type(layer).__name__}")


def _block_rows(block, in_shape) -> tuple[list[LayerSpec], tuple]:
    rows: list[LayerSpec] = []
    if isinstance(block, PlainBlock):
        conv_rows, shape = _conv_rows(block.conv, in_shape)
        rows.extend(conv_rows)
        rows.append(LayerSpec(block.bn.name, "bn", out_ch=shape[0], hw=shape[1:]))
        rows.append(LayerSpec(f"{block.name}.relu", "act", out_ch=shape[0], hw=shape[1:]))
        return rows, shape
    conv_rows, shape = _conv_rows(block.conv1, in_shape)
    rows.extend(conv_rows)
    rows.append(LayerSpec(block.bn1.name, "bn", out_ch=shape[0], hw=shape[1:]))
    rows.append(LayerSpec(f"{block.name}.relu1", "act", out_ch=shape[0], hw=shape[1:]))
    conv_rows, shape = _conv_rows(block.conv2, shape)
    rows.extend(conv_rows)
    rows.append(LayerSpec(block.bn2.name, "bn", out_ch=shape[0], hw=shape[1:]))
    if block.project:
        down_rows, _ = _conv_rows(block.down_conv, in_shape)
        rows.extend(down_rows)
        rows.append(LayerSpec(block.down_bn.name, "bn", out_ch=shape[0], hw=shape[1:]))
    rows.append(LayerSpec(f"{block.name}.add", "add", out_ch=shape[0], hw=shape[1:]))
    rows.append(LayerSpec(f"{block.name}.relu2", "act", out_ch=shape[0], hw=shape[1:]))
    return rows, shape


def backbone_specs(cfg: BackboneConfig) -> list[LayerSpec]:
    """Describe a micro-backbone config by building it (cheap at this scale)."""
    return network_specs(build_backbone(cfg))


def resnet50_cifar_specs(num_classes: int = 100, input_size: int = 32,
                         attention: AttentionBlockConfig | None = None,
                         policy="all") -> list[LayerSpec]:
    """Analysis-only description of the 50-layer bottleneck network at 32x32.

    Attention blocks, when requested, sit at the four stage outputs
    (the spatial-reduction boundaries), channels 256/512/1024/2048.
    """
    widths = (256, 512, 1024, 2048)
    mids = (64, 128, 256, 512)
    blocks = (3, 4, 6, 3)
    strides = (1, 2, 2, 2)
    if policy in ("all", "all-bottlenecks"):
        chosen = set(range(4))
    else:
        chosen = set(int(i) for i in policy)
        if any(i < 0 or i >= 4 for i in chosen):
            raise ConfigError(f"insertion indices {sorted(chosen)} out of range for 4 points")

    rows: list[LayerSpec] = [
        LayerSpec("stem.conv", "conv2d", in_ch=3, out_ch=64, kernel=3,
                  hw=(input_size, input_size)),
        LayerSpec("stem.bn", "bn", out_ch=64, hw=(input_size, input_size)),
        LayerSpec("stem.relu", "act", out_ch=64, hw=(input_size, input_size)),
    ]
    in_ch = 64
    hw = input_size
    for i, (out_ch, mid, n_blocks, stride) in enumerate(zip(widths, mids, blocks, strides)):
        for b in range(n_blocks):
            s = stride if b == 0 else 1
            name = f"stage{i}.block{b}"
            hw_in = hw
            hw_out = hw // s
            rows.append(LayerSpec(f"{name}.conv1", "conv2d", in_ch=in_ch, out_ch=mid,
                                  kernel=1, hw=(hw_in, hw_in)))
            rows.append(LayerSpec(f"{name}.bn1", "bn", out_ch=mid, hw=(hw_in, hw_in)))
            rows.append(LayerSpec(f"{name}.relu1", "act", out_ch=mid, hw=(hw_in, hw_in)))
            rows.append(LayerSpec(f"{name}.conv2", "conv2d", in_ch=mid, out_ch=mid,
                                  kernel=3, hw=(hw_out, hw_out)))
            rows.append(LayerSpec(f"{name}.bn2", "bn", out_ch=mid, hw=(hw_out, hw_out)))
            rows.append(LayerSpec(f"{name}.relu2", "act", out_ch=mid, hw=(hw_out, hw_out)))
            rows.append(LayerSpec(f"{name}.conv3", "conv2d", in_ch=mid, out_ch=out_ch,
                                  kernel=1, hw=(hw_out, hw_out)))
            rows.append(LayerSpec(f"{name}.bn3", "bn", out_ch=out_ch, hw=(hw_out, hw_out)))
            if b == 0:
                rows.append(LayerSpec(f"{name}.down", "conv2d", in_ch=in_ch,
                                      out_ch=out_ch, kernel=1, hw=(hw_out, hw_out)))
                rows.append(LayerSpec(f"{name}.down_bn", "bn", out_ch=out_ch,
                                      hw=(hw_out, hw_out)))
            rows.append(LayerSpec(f"{name}.add", "add", out_ch=out_ch, hw=(hw_out, hw_out)))
            rows.append(LayerSpec(f"{name}.relu3", "act", out_ch=out_ch, hw=(hw_out, hw_out)))
            in_ch = out_ch
            hw = hw_out
        if attention is not None and i in chosen:
            rows.extend(attention_block_specs(f"att{i}", out_ch, (hw, hw), attention))
    rows.append(LayerSpec("gap", "gap", out_ch=widths[-1], hw=(hw, hw)))
    rows.append(LayerSpec("head.fc", "linear", in_features=widths[-1],
                          out_features=num_classes, bias=True))
    return rows
