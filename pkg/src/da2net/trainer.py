"""SGD-with-momentum training loop, loss, checkpointing, and metric logging.

The optimizer applies classic coupled weight decay (decay added to the raw
gradient before the momentum update) to every parameter, BN scale/shift and
gate kernels included. The learning rate steps down by a fixed factor every
``lr_decay_period`` epochs. Given one seed and single-threaded execution the
whole loop is bit-reproducible.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Network, forward_classify
from .data import AugmentSpec, Dataset, compute_channel_stats, make_batch, normalize
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .ops import OpTape, backward
from .tensor import Rng, Tensor

__all__ = [
    "TrainConfig",
    "OptimState",
    "lr_schedule",
    "sgd_step",
    "cross_entropy",
    "cross_entropy_op",
    "train_loop",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "apply_state",
    "fnv1a64",
]

CHECKPOINT_MAGIC = b"DA2C"
CHECKPOINT_VERSION = 1

# epoch/shuffle and augmentation draws use disjoint rng stream ranges
_SHUFFLE_STREAM = 1 << 40


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 30
    lr_decay_factor: float = 10.0
    lr_decay_period: int = 10
    seed: int = 0
    eval_period: int = 1
    augment: bool = True

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if not self.lr_decay_factor > 1.0:
            raise ConfigError(f"lr_decay_factor must be > 1, got {self.lr_decay_factor}")
        if self.lr_decay_period < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr_decay_period/batch_size must be >= 1 and epochs >= 0")


@dataclass
class OptimState:
    """Per-parameter velocity buffers, zero-initialized."""

    velocity: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "OptimState":
        vel = {name: Tensor(np.zeros(t.shape, dtype=t.dtype)) for name, t in params.items()}
        return cls(velocity=vel)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """base_lr / factor^floor(epoch / period)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.base_lr * cfg.lr_decay_factor ** (-(epoch // cfg.lr_decay_period))


def sgd_step(params: dict[str, Tensor], grads: dict[str, Tensor], state: OptimState,
             lr: float, momentum: float, weight_decay: float
             ) -> tuple[dict[str, Tensor], OptimState]:
    """One momentum step: v <- m*v + (g + wd*p); p <- p - lr*v.

    Returns fresh dicts; the inputs are left untouched.
    """
    new_params: dict[str, Tensor] = {}
    new_vel: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads.get(name)
        g_arr = np.zeros(p.shape, dtype=p.dtype) if g is None else g.data
        if not np.all(np.isfinite(g_arr)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g_arr.shape != p.shape:
            raise ShapeError(f"gradient shape {g_arr.shape} != param shape {p.shape} "
                             f"for {name!r}")
        adjusted = g_arr + weight_decay * p.data
        v = state.velocity[name].data if name in state.velocity else 0.0
        v_new = momentum * v + adjusted
        new_vel[name] = Tensor(v_new.astype(p.dtype))
        new_params[name] = Tensor((p.data - lr * v_new).astype(p.dtype))
    return new_params, OptimState(velocity=new_vel)


def cross_entropy(logits: Tensor, labels) -> tuple[float, Tensor]:
    """Mean negative log softmax likelihood and its gradient w.r.t. logits.

    Log-sum-exp stabilized; gradient is (softmax - onehot) / N.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape} labels for {n} logit rows")
    bad = labels[(labels < 0) | (labels >= k)]
    if bad.size:
        raise ShapeError(f"label {int(bad[0])} out of range for {k} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = float(-logp[np.arange(n), labels].mean())
    softmax = np.exp(logp)
    grad = softmax.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, Tensor(grad.astype(logits.dtype))


def cross_entropy_op(logits: Tensor, labels, tape: OpTape | None = None) -> Tensor:
    """Taped scalar loss so backward() can start from the loss itself."""
    loss, grad = cross_entropy(logits, labels)
    out = Tensor(np.asarray([loss], dtype=logits.dtype))
    if tape is not None:
        def vjp(g):
            return (g.reshape(-1)[0] * grad.data,)

        tape.record("cross_entropy", (logits,), out, vjp)
    return out


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a of a byte string."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def save_checkpoint(path, state: dict[str, Tensor]) -> None:
    """Serialize named tensors: magic, version, count, per-tensor records,
    trailing FNV-1a checksum. Tensors are written name-sorted as f32
    little-endian; the file appears atomically (written via a .partial file).
    """
    path = Path(path)
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(state))]
    for name in sorted(state):
        t = state[name]
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(t.data.astype("<f4").tobytes())
    body = b"".join(parts)
    blob = body + struct.pack("<Q", fnv1a64(body))
    partial = path.with_name(path.name + ".partial")
    partial.write_bytes(blob)
    os.replace(partial, path)


def load_checkpoint(path) -> dict[str, Tensor]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 20 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: missing {CHECKPOINT_MAGIC!r} magic")
    body, checksum = blob[:-8], struct.unpack("<Q", blob[-8:])[0]
    if fnv1a64(body) != checksum:
        raise FormatError(f"{path}: checksum mismatch, file corrupted")
    version, count = struct.unpack("<II", body[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 12
    state: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", body, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        n = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        state[name] = Tensor(arr.copy())
    if off != len(body):
        raise FormatError(f"{path}: {len(body) - off} unexpected trailing bytes")
    return state


def apply_state(net: Network, state: dict[str, Tensor]) -> None:
    """Install a checkpoint's tensors into a network's params/buffers by name."""
    for name, t in state.items():
        if name in net.params:
            if net.params[name].shape != t.shape:
                raise FormatError(f"checkpoint tensor {name!r} has shape {t.shape}, "
                                  f"network expects {net.params[name].shape}")
            net.params[name] = t
        elif name in net.buffers:
            net.buffers[name] = t
        else:
            raise FormatError(f"checkpoint tensor {name!r} unknown to this network")
    missing = (set(net.params) | set(net.buffers)) - set(state)
    if missing:
        raise FormatError(f"checkpoint is missing tensors: {sorted(missing)[:5]} ...")


def evaluate(net: Network, ds: Dataset, batch_size: int = 256,
             mean=None, std=None) -> float:
    """Top-1 accuracy over a dataset in eval mode."""
    correct = 0
    m = len(ds)
    for start in range(0, m, batch_size):
        idx = np.arange(start, min(start + batch_size, m))
        batch = Tensor(ds.images.data[idx])
        if mean is not None:
            batch = normalize(batch, mean, std)
        logits, _ = forward_classify(net, batch, mode="eval")
        correct += int((logits.data.argmax(axis=1) == ds.labels[idx]).sum())
    return correct / m


def train_loop(net: Network, train_ds: Dataset, cfg: TrainConfig,
               eval_ds: Dataset | None = None, out_dir=None
               ) -> tuple[list[dict], dict[str, Tensor]]:
    """Run the full recipe; returns (per-epoch metrics, final state dict).

    Normalization constants come from the training split. When ``out_dir`` is
    given, metrics are written as JSON lines and checkpoints saved at the end
    and at every eval-accuracy improvement.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    mean, std = compute_channel_stats(train_ds)
    std = np.maximum(std, 1e-6)
    spec = AugmentSpec(pad=4, crop=train_ds.images.shape[2], flip_prob=0.5,
                       mean=tuple(float(v) for v in mean),
                       std=tuple(float(v) for v in std)) if cfg.augment else None
    rng = Rng(cfg.seed)
    opt = OptimState.for_params(net.params)
    metrics: list[dict] = []
    best_eval = -1.0
    m = len(train_ds)

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = rng.split(_SHUFFLE_STREAM + epoch).permutation(m)
        loss_sum = 0.0
        correct = 0
        for step, start in enumerate(range(0, m, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if spec is not None:
                batch, labels = make_batch(train_ds, idx, spec, rng, epoch=epoch)
            else:
                batch = Tensor(train_ds.images.data[idx])
                batch = normalize(batch, mean, std)
                labels = train_ds.labels[idx]
            logits, tape = forward_classify(net, batch, mode="train")
            loss_t = cross_entropy_op(logits, labels, tape)
            loss = loss_t.item()
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}")
            grads = backward(tape)
            net.params, opt = sgd_step(net.params, grads, opt, lr,
                                       cfg.momentum, cfg.weight_decay)
            loss_sum += loss * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels).sum())

        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / m,
            "train_acc": correct / m,
            "eval_acc": None,
        }
        if eval_ds is not None and ((epoch + 1) % cfg.eval_period == 0
                                    or epoch == cfg.epochs - 1):
            row["eval_acc"] = evaluate(net, eval_ds, cfg.batch_size, mean, std)
            if out_dir is not None and row["eval_acc"] > best_eval:
                best_eval = row["eval_acc"]
                save_checkpoint(out_dir / "best.ckpt", {**net.params, **net.buffers})
        metrics.append(row)

    final_state = {**net.params, **net.buffers}
    if out_dir is not None:
        save_checkpoint(out_dir / "final.ckpt", final_state)
        with open(out_dir / "metrics.jsonl", "w") as fh:
            for row in metrics:
                fh.write(json.dumps(row) + "\n")
    return metrics, final_state
