"""Command-line entry point: train, analyze, gradcheck, bench.

Runs are driven by a TOML config with ``[arch]``, ``[attention]``, ``[train]``,
``[data]``, and ``[output]`` sections; ``--set section.key=value`` overrides
individual scalars after file parsing, and the fully resolved config is
written into the output directory before any training starts.

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 numeric
failure (NaN/Inf during training).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from . import checks
from .analyzer import analyze, count_flops, measure_throughput
from .archs import ANALYSIS_ONLY_PRESETS, network_specs, resnet50_cifar_specs
from .attention import AttentionBlockConfig, AttentionLayerConfig
from .backbone import BackboneConfig, build_backbone
from .data import Dataset, load_cifar100, load_converted, synth_dataset
from .errors import ConfigError, Da2Error, FormatError, NumericError
from .trainer import TrainConfig, train_loop

DEFAULTS = {
    "arch": {
        "preset": "micro",
        "widths": [16, 32, 64],
        "blocks": [1, 1, 1],
        "block_kind": "residual",
        "num_classes": 10,
        "in_channels": 3,
        "input_size": 32,
        "seed": 0,
    },
    "attention": {
        "enabled": True,
        "sizes": [3, 5, 7],
        "g": 1,
        "alpha": 9,
        "adaptive": True,
        "pointwise": False,
        "enforce_ascending": True,
        "policy": "all",
    },
    "train": {
        "epochs": 30,
        "batch_size": 128,
        "base_lr": 0.1,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "lr_decay_factor": 10.0,
        "lr_decay_period": 10,
        "seed": 0,
        "eval_period": 1,
        "augment": True,
    },
    "data": {
        "kind": "synth",
        "classes": 4,
        "per_class": 100,
        "eval_per_class": 50,
        "seed": 1234,
        "eval_seed": 4321,
        "path": "",
        "eval_path": "",
    },
    "output": {"dir": "runs/default"},
}


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    cfg = {k: dict(v) for k, v in DEFAULTS.items()}
    if path is None:
        return cfg
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    with open(p, "rb") as fh:
        try:
            user = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
    unknown = set(user) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return _deep_merge(cfg, user)


def parse_set_value(raw: str):
    """Interpret an override value with TOML scalar rules, else keep the string."""
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(cfg: dict, sets: list[str]) -> dict:
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"--set key must be section.key, got {dotted!r}")
        section, key = parts
        if section not in cfg or key not in cfg[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        cfg = _deep_merge(cfg, {section: {key: parse_set_value(raw.strip())}})
    return cfg


def dump_toml(cfg: dict) -> str:
    """Serialize the (restricted) config schema: sections of scalars/lists."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int, float)):
            return repr(v)
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        raise ConfigError(f"cannot serialize config value {v!r}")

    lines = []
    for section, body in cfg.items():
        lines.append(f"[{section}]")
        for key, value in body.items():
            lines.append(f"{key} = {fmt(value)}")
        lines.append("")
    return "\n".join(lines)


def attention_config(cfg: dict) -> AttentionBlockConfig | None:
    a = cfg["attention"]
    if not a["enabled"]:
        return None
    layers = tuple(
        AttentionLayerConfig(n=int(n), g=int(a["g"]), alpha=int(a["alpha"]),
                             use_pointwise_reduction=bool(a["pointwise"]))
        for n in a["sizes"])
    return AttentionBlockConfig(layers=layers, adaptive=bool(a["adaptive"]),
                                enforce_ascending=bool(a["enforce_ascending"]))


def backbone_config(cfg: dict) -> BackboneConfig:
    arch = cfg["arch"]
    if arch["preset"] in ANALYSIS_ONLY_PRESETS:
        raise ConfigError(f"preset {arch['preset']!r} is analysis-only and cannot be trained")
    return BackboneConfig(
        widths=tuple(arch["widths"]), blocks=tuple(arch["blocks"]),
        block_kind=arch["block_kind"], num_classes=arch["num_classes"],
        in_channels=arch["in_channels"], input_size=arch["input_size"],
        seed=arch["seed"], attention=attention_config(cfg),
        attention_policy=cfg["attention"]["policy"])


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        base_lr=t["base_lr"], momentum=t["momentum"], weight_decay=t["weight_decay"],
        batch_size=t["batch_size"], epochs=t["epochs"],
        lr_decay_factor=t["lr_decay_factor"], lr_decay_period=t["lr_decay_period"],
        seed=t["seed"], eval_period=t["eval_period"], augment=t["augment"])


def load_datasets(cfg: dict) -> tuple[Dataset, Dataset | None]:
    d = cfg["data"]
    if d["kind"] == "synth":
        train = synth_dataset(d["classes"], d["per_class"], d["seed"])
        evald = synth_dataset(d["classes"], d["eval_per_class"], d["eval_seed"])
        return train, evald
    if d["kind"] == "cifar100":
        return load_cifar100(d["path"], "train"), load_cifar100(d["path"], "test")
    if d["kind"] == "converted":
        train = load_converted(d["path"])
        evald = load_converted(d["eval_path"]) if d["eval_path"] else None
        return train, evald
    raise ConfigError(f"unknown data kind {d['kind']!r}")


def cmd_train(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.set or [])
    bcfg = backbone_config(cfg)
    tcfg = train_config(cfg)
    train_ds, eval_ds = load_datasets(cfg)
    if train_ds.num_classes != bcfg.num_classes:
        raise ConfigError(f"dataset has {train_ds.num_classes} classes, "
                          f"network is configured for {bcfg.num_classes}")
    net = build_backbone(bcfg)

    out_dir = Path(cfg["output"]["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved.toml").write_text(dump_toml(cfg))

    metrics, _state = train_loop(net, train_ds, tcfg, eval_ds=eval_ds, out_dir=out_dir)
    if metrics:
        last = metrics[-1]
        print(f"done: {len(metrics)} epochs, train_acc={last['train_acc']:.4f}, "
              f"eval_acc={last['eval_acc']}")
    else:
        print("done: 0 epochs (checkpoint equals initialization)")
    return 0


def _arch_tables(ref: str) -> dict:
    """An arch reference is either a preset name or a TOML file path."""
    presets = {"micro", "resnet50_cifar"}
    if ref in presets:
        return {"arch": {"preset": ref}}
    p = Path(ref)
    if not p.is_file():
        raise FileNotFoundError(f"arch reference {ref!r} is neither a preset "
                                f"({sorted(presets)}) nor a file")
    with open(p, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc


def _specs_for(ref: str, args, with_attention: bool):
    tables = _arch_tables(ref)
    cfg = _deep_merge({k: dict(v) for k, v in DEFAULTS.items()}, tables)
    if "attention" not in tables:
        cfg["attention"]["enabled"] = False
    if with_attention and args.attention:
        cfg["attention"]["enabled"] = True
        cfg["attention"]["sizes"] = [int(s) for s in args.attention.split(",")]
        if args.g is not None:
            cfg["attention"]["g"] = args.g
        if args.alpha is not None:
            cfg["attention"]["alpha"] = args.alpha
        if args.pointwise:
            cfg["attention"]["pointwise"] = True
    if args.num_classes is not None:
        cfg["arch"]["num_classes"] = args.num_classes
    if args.input_size is not None:
        cfg["arch"]["input_size"] = args.input_size

    acfg = attention_config(cfg)
    if cfg["arch"]["preset"] == "resnet50_cifar":
        return resnet50_cifar_specs(num_classes=cfg["arch"]["num_classes"],
                                    input_size=cfg["arch"]["input_size"],
                                    attention=acfg,
                                    policy=cfg["attention"]["policy"])
    return network_specs(build_backbone(backbone_config(cfg)))


def cmd_analyze(args) -> int:
    specs = _specs_for(args.arch, args, with_attention=True)
    baseline = _specs_for(args.baseline, args, with_attention=False) if args.baseline else None
    report = analyze(specs, baseline)
    if args.json:
        print(json.dumps(report.to_json(), indent=2))
    else:
        print(report.to_text())
    return 0


def cmd_gradcheck(args) -> int:
    if args.corrupt:
        checks.set_corrupt(args.corrupt)
    try:
        errs = checks.run_scope(args.scope, args.seed)
    finally:
        checks.set_corrupt(None)
    failures = {k: v for k, v in errs.items() if not v < checks.GRAD_TOLERANCE}
    for name in sorted(errs):
        status = "FAIL" if name in failures else "ok"
        print(f"{status:>4}  {name:<50} max_rel_err={errs[name]:.3e}")
    if failures:
        print(f"{len(failures)} parameter group(s) exceeded tolerance "
              f"{checks.GRAD_TOLERANCE:g}: {', '.join(sorted(failures))}")
        return 1
    print(f"all {len(errs)} parameter groups within {checks.GRAD_TOLERANCE:g}")
    return 0


def _bench_network(ref: str, args, enable_attention: bool):
    tables = _arch_tables(ref)
    cfg = _deep_merge({k: dict(v) for k, v in DEFAULTS.items()}, tables)
    if "attention" not in tables and not args.attention:
        cfg["attention"]["enabled"] = enable_attention and cfg["attention"]["enabled"]
    if not enable_attention:
        cfg["attention"]["enabled"] = False
    elif args.attention:
        cfg["attention"]["enabled"] = True
        cfg["attention"]["sizes"] = [int(s) for s in args.attention.split(",")]
    return build_backbone(backbone_config(cfg))


def cmd_bench(args) -> int:
    result = {
        "batch_size": args.batch,
        "batches": args.batches,
        "repeats": args.repeats,
    }
    net = _bench_network(args.arch, args, enable_attention=not args.compare)
    base = measure_throughput(net, args.batch, args.batches, args.warmup, args.repeats)
    if args.compare:
        att_net = _bench_network(args.arch, args, enable_attention=True)
        att = measure_throughput(att_net, args.batch, args.batches, args.warmup, args.repeats)
        result["baseline"] = base.to_json()
        result["attention"] = att.to_json()
        result["latency_overhead_rel"] = att.latency / base.latency - 1.0
    else:
        result.update(base.to_json())
    print(json.dumps(result, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="da2net")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training loop from a config file")
    p_train.add_argument("--config", help="TOML run config")
    p_train.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                         help="override one config value (repeatable)")
    p_train.set_defaults(fn=cmd_train)

    p_an = sub.add_parser("analyze", help="parameter/MAC report for an architecture")
    p_an.add_argument("--arch", required=True, help="preset name or arch TOML path")
    p_an.add_argument("--baseline", help="second architecture to diff against")
    p_an.add_argument("--attention", help="comma-separated filter sizes, e.g. 3,5,7")
    p_an.add_argument("--g", type=int, help="grouping ratio (channels per group)")
    p_an.add_argument("--alpha", type=int, help="gate neighborhood size")
    p_an.add_argument("--pointwise", action="store_true",
                      help="use the 1x1 squeeze/expand comparison variant")
    p_an.add_argument("--num-classes", type=int)
    p_an.add_argument("--input-size", type=int)
    p_an.add_argument("--json", action="store_true")
    p_an.set_defaults(fn=cmd_analyze)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p_gc.add_argument("--scope", default="all",
                      help="op name, 'da2net', 'full', or 'all'")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--corrupt", help=argparse.SUPPRESS)  # test hook
    p_gc.set_defaults(fn=cmd_gradcheck)

    p_b = sub.add_parser("bench", help="eval-mode throughput measurement")
    p_b.add_argument("--arch", default="micro")
    p_b.add_argument("--attention", help="comma-separated filter sizes")
    p_b.add_argument("--batch", type=int, default=32)
    p_b.add_argument("--batches", type=int, default=10)
    p_b.add_argument("--warmup", type=int, default=2)
    p_b.add_argument("--repeats", type=int, default=5)
    p_b.add_argument("--compare", action="store_true",
                     help="benchmark baseline and attention variants together")
    p_b.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Da2Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
