"""Finite-difference verification suites for every differentiable primitive.

Each suite runs in f64 at eps=1e-5 and reports the max relative error
``|analytic - numeric| / max(1, |analytic|)`` per parameter group; everything
must land below 1e-4. The suites back both the test suite and the
``gradcheck`` CLI command. ``set_corrupt()`` injects a deliberate error into
one op's analytic gradients so the harness itself can be tested.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import ops
from .attention import (
    AttentionBlockConfig,
    AttentionBlockParams,
    AttentionLayerParams,
    block_state_items,
    da2net_forward,
    init_block_params,
)
from .backbone import BackboneConfig, build_backbone, forward_classify
from .errors import ConfigError
from .ops import BatchNormParams, Conv2dParams, OpTape, backward
from .tensor import Rng, Tensor, finite_difference_gradient
from .trainer import cross_entropy, cross_entropy_op

__all__ = ["max_rel_err", "check_function", "run_scope", "set_corrupt", "SCOPES",
           "GRAD_TOLERANCE"]

GRAD_TOLERANCE = 1e-4
_EPS = 1e-5

_CORRUPT_OP: str | None = None


def set_corrupt(op: str | None) -> None:
    """Test hook: perturb the analytic gradients of suites whose label contains `op`."""
    global _CORRUPT_OP
    _CORRUPT_OP = op


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def check_function(label: str, build, tensors: dict[str, Tensor],
                   eps: float = _EPS) -> dict[str, float]:
    """Compare taped gradients of ``build`` against central differences.

    ``build(tape, tensors)`` must run the computation on the given tensors and
    return a scalar Tensor recorded on the tape (when one is passed). Every
    entry of ``tensors`` is differentiated.
    """
    tape = OpTape()
    for name, t in tensors.items():
        tape.watch(name, t)
    build(tape, tensors)
    grads = backward(tape)

    errs: dict[str, float] = {}
    for name, t in tensors.items():
        def f(v: Tensor, _name=name) -> float:
            trial = dict(tensors)
            trial[_name] = v
            return build(None, trial).item()

        numeric = finite_difference_gradient(f, t, eps)
        analytic = grads[name].data
        if _CORRUPT_OP is not None and _CORRUPT_OP in label:
            analytic = analytic + 1e-2
        errs[f"{label}.{name}"] = max_rel_err(analytic, numeric.data)
    return errs


def _rng_tensor(rng: Rng, shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(shape, 0.0, scale, dtype="f64"))


def check_conv2d(seed: int = 0) -> dict[str, float]:
    rng = Rng(seed, stream=1)
    errs = {}
    cases = [
        ("g1_n3", 4, 4, 1, 3, 1, 1),
        ("g2_n3_s2", 4, 8, 2, 3, 2, 1),
        ("depthwise_n5", 4, 4, 4, 5, 1, 2),
    ]
    for tag, c_in, c_out, groups, k, stride, pad in cases:
        x = _rng_tensor(rng, (2, c_in, 5, 5))
        w = _rng_tensor(rng, (c_out, c_in // groups, k, k), 0.5)
        b = _rng_tensor(rng, (c_out,), 0.1)

        def build(tape, t, groups=groups, stride=stride, pad=pad):
            p = Conv2dParams(weight=t["w"], bias=t["b"], groups=groups,
                             stride=stride, padding=pad)
            return ops.reduce_sum(ops.sigmoid(ops.conv2d_grouped(t["x"], p, tape), tape), tape)

        errs.update(check_function(f"conv2d.{tag}", build, {"x": x, "w": w, "b": b}))
    return errs


def check_conv1d(seed: int = 0) -> dict[str, float]:
    rng = Rng(seed, stream=2)
    errs = {}
    for alpha in (3, 5):
        d = _rng_tensor(rng, (3, 8))
        k = _rng_tensor(rng, (alpha,), 0.5)
        b = _rng_tensor(rng, (1,), 0.1)

        def build(tape, t):
            return ops.reduce_sum(ops.sigmoid(
                ops.conv1d_channel(t["d"], t["k"], t["b"], tape), tape), tape)

        errs.update(check_function(f"conv1d.a{alpha}", build, {"d": d, "k": k, "b": b}))
    return errs


def check_gap(seed: int = 0) -> dict[str, float]:
    rng = Rng(seed, stream=3)
    x = _rng_tensor(rng, (2, 5, 4, 3))

    def build(tape, t):
        return ops.reduce_sum(ops.sigmoid(ops.global_avg_pool(t["x"], tape), tape), tape)

    return check_function("gap", build, {"x": x})


def check_batchnorm(seed: int = 0) -> dict[str, float]:
    rng = Rng(seed, stream=4)
    errs = {}
    for mode in ("train", "eval"):
        x = _rng_tensor(rng, (2, 3, 4, 4))
        gamma = _rng_tensor(rng, (3,), 0.5)
        beta = _rng_tensor(rng, (3,), 0.5)

        def build(tape, t, mode=mode):
            p = BatchNormParams(gamma=t["gamma"], beta=t["beta"])
            y = ops.batch_norm(t["x"], p, mode, tape)
            return ops.reduce_sum(ops.sigmoid(y, tape), tape)

        errs.update(check_function(f"batch_norm.{mode}", build,
                                   {"x": x, "gamma": gamma, "beta": beta}))
    return errs


def check_sigmoid(seed: int = 0) -> dict[str, float]:
    rng = Rng(seed, stream=5)
    x = _rng_tensor(rng, (2, 3), 2.0)

    def build(tape, t):
        return ops.reduce_sum(ops.sigmoid(t["x"], tape), tape)

    return check_function("sigmoid", build, {"x": x})


def check_relu(seed: int = 0) -> dict[str, float]:
    rng = Rng(seed, stream=6)
    raw = rng.normal((3, 4), 0.0, 1.0, dtype="f64")
    # finite differences are invalid at the kink; keep values away from 0
    raw = np.where(np.abs(raw) < 0.05, raw + 0.1, raw)
    x = Tensor(raw)

    def build(tape, t):
        return ops.reduce_sum(ops.relu(t["x"], tape), tape)

    return check_function("relu", build, {"x": x})


def check_linear(seed: int = 0) -> dict[str, float]:
    rng = Rng(seed, stream=7)
    x = _rng_tensor(rng, (3, 4))
    w = _rng_tensor(rng, (5, 4), 0.5)
    b = _rng_tensor(rng, (5,), 0.1)

    def build(tape, t):
        return ops.reduce_sum(ops.sigmoid(ops.linear(t["x"], t["w"], t["b"], tape), tape), tape)

    return check_function("linear", build, {"x": x, "w": w, "b": b})


def check_scale(seed: int = 0) -> dict[str, float]:
    from .tensor import elementwise_scale_broadcast

    rng = Rng(seed, stream=8)
    errs = {}
    for tag, w_batch in (("shared", 1), ("per_sample", 2)):
        x = _rng_tensor(rng, (2, 3, 2, 2))
        w = _rng_tensor(rng, (w_batch, 3, 1, 1), 0.5)

        def build(tape, t):
            return ops.reduce_sum(elementwise_scale_broadcast(t["x"], t["w"], tape), tape)

        errs.update(check_function(f"scale.{tag}", build, {"x": x, "w": w}))
    return errs


def check_cross_entropy(seed: int = 0) -> dict[str, float]:
    rng = Rng(seed, stream=9)
    logits = _rng_tensor(rng, (4, 5), 2.0)
    labels = np.array([0, 2, 4, 1])

    def build(tape, t):
        return cross_entropy_op(t["logits"], labels, tape)

    return check_function("cross_entropy", build, {"logits": logits})


# every axis value of the block domain appears at least once below
_BLOCK_CASES = [
    ((3,), 1, 3, 4),
    ((5,), 2, 9, 4),
    ((7,), 1, 9, 4),
    ((9,), 2, 3, 4),
    ((3, 5), 1, 9, 4),
    ((7, 9), 2, 3, 4),
    ((3, 5, 7), 1, 9, 4),
    ((5, 7, 9), 2, 9, 8),
]


def _assemble_block(cfg: AttentionBlockConfig, channels: int,
                    t: dict[str, Tensor]) -> AttentionBlockParams:
    """Block structs straight from flat tensors, with fresh BN running stats."""
    block = AttentionBlockParams(cfg=cfg, channels=channels)
    for j, layer_cfg in enumerate(cfg.layers):
        conv = Conv2dParams(weight=t[f"l{j}.conv.w"], groups=channels // layer_cfg.g,
                            stride=1, padding=(layer_cfg.n - 1) // 2)
        bn = BatchNormParams(gamma=t[f"l{j}.bn.gamma"], beta=t[f"l{j}.bn.beta"])
        block.layers.append(AttentionLayerParams(
            conv=conv, bn=bn, select_kernel=t[f"l{j}.select.k"]))
    return block


def check_da2net(seed: int = 0, cases=None) -> dict[str, float]:
    """Full-block gradients: loss = sum of the block output, train mode."""
    errs = {}
    for sizes, g, alpha, channels in (cases or _BLOCK_CASES):
        rng = Rng(seed, stream=hash((sizes, g, alpha)) & 0xFFFF)
        cfg = AttentionBlockConfig.from_sizes(sizes, g=g, alpha=alpha)
        z = _rng_tensor(rng, (1, channels, 4, 4))
        template = init_block_params(cfg, channels, rng, dtype="f64")
        params, _ = block_state_items(template)
        tag = "da2net." + "-".join(map(str, sizes)) + f".g{g}.a{alpha}"

        def build(tape, t, cfg=cfg, channels=channels):
            block = _assemble_block(cfg, channels, t)
            out = da2net_forward(t["z"], block, "train", tape)
            return ops.reduce_sum(out, tape)

        tensors = {"z": z, **params}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # alpha may exceed tiny channel counts
            errs.update(check_function(tag, build, tensors))
    return errs


def check_full_network(seed: int = 0) -> dict[str, float]:
    """End-to-end micro network: conv/BN/ReLU stages, attention, CE loss."""
    cfg = BackboneConfig(widths=(4, 8), blocks=(1, 1), block_kind="residual",
                         num_classes=3, input_size=8, seed=seed,
                         attention=AttentionBlockConfig.from_sizes((3,), g=1, alpha=3))
    net = build_backbone(cfg, dtype="f64")
    rng = Rng(seed, stream=11)
    batch = Tensor(rng.normal((1, 3, 8, 8), 0.0, 1.0, dtype="f64"))
    labels = np.array([1])

    logits, tape = forward_classify(net, batch, mode="train")
    cross_entropy_op(logits, labels, tape)
    analytic = backward(tape)

    errs = {}
    saved_buffers = dict(net.buffers)
    for name in net.params:
        def f(v: Tensor, _name=name) -> float:
            saved = net.params[_name]
            net.params[_name] = v
            try:
                out, _ = forward_classify(net, batch, mode="train", record=False)
                loss, _grad = cross_entropy(out, labels)
                return loss
            finally:
                net.params[_name] = saved
                net.buffers.clear()
                net.buffers.update(saved_buffers)

        numeric = finite_difference_gradient(f, net.params[name], _EPS)
        a = analytic[name].data
        if _CORRUPT_OP is not None and _CORRUPT_OP in "full_network":
            a = a + 1e-2
        errs[f"full_network.{name}"] = max_rel_err(a, numeric.data)
    return errs


SCOPES = {
    "conv2d": check_conv2d,
    "conv1d": check_conv1d,
    "gap": check_gap,
    "batchnorm": check_batchnorm,
    "sigmoid": check_sigmoid,
    "relu": check_relu,
    "linear": check_linear,
    "scale": check_scale,
    "cross_entropy": check_cross_entropy,
    "da2net": check_da2net,
    "full": check_full_network,
}


def run_scope(scope: str, seed: int = 0) -> dict[str, float]:
    """Run one named suite, or every suite for scope 'all'."""
    if scope == "all":
        errs: dict[str, float] = {}
        for fn in SCOPES.values():
            errs.update(fn(seed))
        return errs
    if scope not in SCOPES:
        raise ConfigError(f"unknown gradcheck scope {scope!r}; "
                          f"choose from {', '.join(list(SCOPES) + ['all'])}")
    return SCOPES[scope](seed)
