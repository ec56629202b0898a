"""Command-line entry point: ``vlq {train,assemble,eval,mix,inspect}``.

Exit codes: 0 success, 2 configuration or validation error, 3 training
diverged, 4 corrupt data or missing model sections.

Structured output goes to stdout (or ``--out`` files) as one JSON object per
line; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import codec, mixed
from .data import load_dataset
from .errors import CorruptData, CorruptDataset, DivergenceError, Infeasible, MissingLayer, ValidationError, VLQError
from .infer import evaluate
from .model import ARCHITECTURES, BN_MODES
from .train.loop import KD_MODES, MOO_MODES, TrainConfig, train_ascending_baseline, train_joint
from .train.params import to_layered
from .vertical import assemble

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_DATA = 0, 2, 3, 4


class ConfigError(VLQError):
    pass


@dataclass(frozen=True)
class Key:
    kind: type
    default: object
    doc: str
    choices: tuple = ()


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# Every key a config file may set. Anything else is rejected.
SCHEMA = {
    "dataset": Key(str, "mnist", "dataset name", ("mnist", "cifar10")),
    "arch": Key(str, "mnist-small", "network", tuple(ARCHITECTURES)),
    "width": Key(int, 8, "base channel width of the network"),
    "trainer": Key(str, "joint", "joint training or the stage-wise baseline", ("joint", "ascending")),
    "n": Key(int, 2, "number of enhance planes"),
    "basic_bits": Key(int, 2, "bit width of the basic layer"),
    "moo": Key(str, "us", "loss combination", MOO_MODES),
    "kd": Key(str, "cos", "self-distillation", KD_MODES),
    "bn": Key(str, "full", "batch-norm sharing across levels", BN_MODES),
    "compensate": Key(_bool, True, "fold the compensation offset into lower levels"),
    "lr": Key(float, 0.02, "initial learning rate of joint training"),
    "momentum": Key(float, 0.9, "SGD momentum"),
    "weight_decay": Key(float, 1e-4, "L2 penalty on weights"),
    "epochs": Key(int, 3, "joint training epochs (per stage for the baseline)"),
    "batch_size": Key(int, 128, "mini-batch size"),
    "grad_scale": Key(_bool, True, "scale step-size gradients"),
    "bn_momentum": Key(float, 0.1, "running-statistics momentum"),
    "fp_epochs": Key(int, 2, "full-precision pretraining epochs"),
    "fp_lr": Key(float, 0.1, "full-precision learning rate"),
    "seed": Key(int, 0, "random seed"),
    "log_iterations": Key(_bool, False, "emit one record per iteration (always on for mgd)"),
    "train_subset": Key(int, 0, "use only the first N training images (0 = all)"),
    "test_subset": Key(int, 0, "evaluate on the first N test images (0 = all)"),
}


def read_config(path) -> dict:
    """Parse ``key = value`` lines (``#`` comments allowed) against SCHEMA."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out = {}
    for name, raw in parser["run"].items():
        out[name] = _convert(name, raw)
    return out


def _convert(name: str, raw):
    if name not in SCHEMA:
        raise ConfigError(f"unknown configuration key {name!r}")
    key = SCHEMA[name]
    try:
        value = key.kind(raw) if isinstance(raw, str) else raw
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    if key.choices and value not in key.choices:
        raise ConfigError(f"{name} must be one of {', '.join(key.choices)}; got {value!r}")
    return value


def resolve(args) -> dict:
    cfg = {name: key.default for name, key in SCHEMA.items()}
    if args.config:
        cfg.update(read_config(args.config))
    for flag, name in (("seed", "seed"), ("moo", "moo"), ("kd", "kd"), ("bn", "bn"), ("trainer", "trainer")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[name] = _convert(name, value)
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        n=cfg["n"], basic_bits=cfg["basic_bits"], moo=cfg["moo"], kd=cfg["kd"], bn_mode=cfg["bn"],
        compensate=cfg["compensate"], lr=cfg["lr"], momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], grad_scale=cfg["grad_scale"],
        bn_momentum=cfg["bn_momentum"], fp_epochs=cfg["fp_epochs"], fp_lr=cfg["fp_lr"], seed=cfg["seed"],
        log_iterations=cfg["log_iterations"] or cfg["moo"] == "mgd",
    )


def _emit(records, stream):
    for rec in records:
        stream.write(json.dumps(rec, sort_keys=True) + "\n")


def _test_arrays(name: str, limit: int = 0):
    data = load_dataset(name, "test")
    if limit:
        data = data.subset(limit)
    return data.get(np.arange(len(data)))


# -- commands -------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = resolve(args)
    tc = train_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(cfg["dataset"], "train")
    if cfg["train_subset"]:
        data = data.subset(cfg["train_subset"])
    arch = ARCHITECTURES[cfg["arch"]](cfg["width"])
    if arch.input_shape != data.shape:
        raise ConfigError(f"{cfg['arch']} expects inputs {arch.input_shape}, dataset has {data.shape}")
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w") as metrics:
        _emit([{"phase": "config", **cfg}], metrics)
        try:
            if cfg["trainer"] == "ascending":
                res = train_ascending_baseline(tc, data, arch)
                model, records, state = res.model, res.metrics, {}
            else:
                res = train_joint(tc, data, arch)
                model, records, state = res.model(), res.metrics, res.optimizer
        except DivergenceError as exc:
            if exc.checkpoint is not None:
                try:
                    codec.write_model(to_layered(exc.checkpoint), out / "checkpoint.vlq")
                except (VLQError, ValueError):
                    pass
            _emit([{"phase": "diverged", "level": exc.level}], metrics)
            raise
        _emit(records, metrics)
        paths = codec.write_model(model, out / "model.vlq", split=True)
        x, y = _test_arrays(cfg["dataset"], cfg["test_subset"])
        evals = []
        for k in range(model.n + 1):
            rec = evaluate(codec.decode_at_precision(out / "model.vlq", k), x, y)
            evals.append({"phase": "eval", "level": k, **rec})
        _emit(evals, metrics)
    np.savez(
        out / "state.npz",
        seed=np.asarray(cfg["seed"]),
        epoch=np.asarray(cfg["epochs"]),
        config=np.asarray(json.dumps(cfg, sort_keys=True)),
        **{f"velocity/{k}": v for k, v in state.items()},
    )
    _emit([{"files": [str(p) for p in paths], "metrics": str(metrics_path)}] + evals, sys.stdout)
    return EXIT_OK


def _levels_arg(text: str, manifest):
    if text is None:
        return manifest.allocation if manifest.allocation is not None else manifest.n
    if text == "mixed":
        if manifest.allocation is None:
            raise ConfigError("model carries no mixed-precision allocation")
        return manifest.allocation
    try:
        bits = int(text)
    except ValueError:
        raise ConfigError(f"--bits expects an integer or 'mixed', got {text!r}") from None
    level = bits - manifest.basic_bits
    if not 0 <= level <= manifest.n:
        raise ConfigError(f"--bits must lie in [{manifest.basic_bits}, {manifest.basic_bits + manifest.n}]")
    return level


def cmd_assemble(args) -> int:
    man = codec.peek_manifest(args.model)
    level = _levels_arg(args.bits, man)
    with codec.Reader(args.model) as reader:
        top = level if np.ndim(level) == 0 else max(level)
        missing = [i for i in range(1, top + 1) if reader.section(i) is None]
        if missing:
            raise MissingLayer(missing)
        used = reader.bytes_read
    model = codec.decode_at_precision(args.model, level)
    rec = {"model": str(args.model), "bits": list(model.bits), "levels": list(model.levels), "bytes_read": used}
    if args.out:
        rec["written"] = codec.write_prefix(args.model, top, args.out)
        rec["out"] = str(args.out)
    _emit([rec], sys.stdout)
    return EXIT_OK


def cmd_eval(args) -> int:
    man = codec.peek_manifest(args.model)
    levels = list(range(man.n + 1)) if args.all else [_levels_arg(args.bits, man)]
    x, y = _test_arrays(args.dataset, args.limit)
    if x.shape[1:] != man.arch.input_shape:
        raise ValidationError(f"model expects inputs {man.arch.input_shape}, {args.dataset} has {x.shape[1:]}")
    records = []
    for level in levels:
        model = codec.decode_at_precision(args.model, level)
        records.append({"model": str(args.model), "dataset": args.dataset, **evaluate(model, x, y)})
    _emit(records, sys.stdout)
    return EXIT_OK


def cmd_mix(args) -> int:
    model = codec.decode_full(args.model)
    total = sum(spec.weight_count for spec in model.arch.layers)
    train = load_dataset(args.dataset, "train")
    calib = train.get(np.arange(min(args.calib, len(train))))[0] if args.calib else None
    test = _test_arrays(args.dataset, args.limit)
    if args.sweep:
        budgets = [int(b) for b in args.sweep.split(",")]
        _emit(mixed.budget_sweep(model, budgets, calib, test), sys.stdout)
        return EXIT_OK
    if args.budget_bits is None:
        raise ConfigError("mix needs --budget-bits or --sweep")
    alloc, assembled, tagged = mixed.mix(model, args.budget_bits, calib)
    errors = mixed.layer_error_table(model)
    layers = [
        {"layer": m, "level": k, "bits": model.basic_bits + k, "weights": spec.weight_count, "error": float(errors[m, k])}
        for m, (spec, k) in enumerate(zip(model.arch.layers, alloc.levels))
    ]
    rec = {**alloc.as_record(), "bits_per_weight": alloc.total_bits / total, "layers": layers}
    rec.update({k: v for k, v in evaluate(assembled, *test).items() if k.startswith("top")})
    if args.out:
        codec.write_model(tagged, args.out, split=False)
        rec["out"] = str(args.out)
    _emit([rec], sys.stdout)
    return EXIT_OK


def histogram_rows(model):
    """(layer, level, bits, value, count) for every integer bin that occurs."""
    rows = []
    for m, stack in enumerate(model.stacks):
        for k in range(stack.n + 1):
            values, counts = np.unique(assemble(stack, k).data, return_counts=True)
            rows.extend((m, k, model.basic_bits + k, int(v), int(c)) for v, c in zip(values, counts))
    return rows


def cmd_inspect(args) -> int:
    model = codec.decode_full(args.model)
    out = sys.stdout
    out.write("# layer\tkind\tshape\ttop_step\tact_steps\n")
    for m, (spec, stack) in enumerate(zip(model.arch.layers, model.stacks)):
        steps = ",".join(f"{s:.6g}" for s in model.act_steps[m])
        out.write(f"# {m}\t{spec.kind}\t{'x'.join(map(str, spec.weight_shape))}\t{stack.top_step:.6g}\t{steps}\n")
    out.write("layer\tlevel\tbits\tvalue\tcount\n")
    for row in histogram_rows(model):
        out.write("\t".join(map(str, row)) + "\n")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vlq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a vertical-layered model")
    t.add_argument("--config", help="key = value configuration file")
    t.add_argument("--seed", type=int)
    t.add_argument("--moo", choices=MOO_MODES)
    t.add_argument("--kd", choices=KD_MODES)
    t.add_argument("--bn", choices=BN_MODES)
    t.add_argument("--trainer", choices=("joint", "ascending"))
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("assemble", help="read a model at one precision")
    a.add_argument("model")
    a.add_argument("--bits", help="weight bit width, or 'mixed'")
    a.add_argument("--out", help="write a file holding only the sections needed")
    a.set_defaults(func=cmd_assemble)

    e = sub.add_parser("eval", help="test-set accuracy")
    e.add_argument("model")
    e.add_argument("--bits", help="weight bit width, or 'mixed'")
    e.add_argument("--all", action="store_true", help="every precision")
    e.add_argument("--dataset", default="mnist", choices=("mnist", "cifar10"))
    e.add_argument("--limit", type=int, default=0, help="first N test images only")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("mix", help="mixed-precision allocation under a bit budget")
    m.add_argument("model")
    m.add_argument("--budget-bits", type=int)
    m.add_argument("--sweep", help="comma-separated budgets; prints one record per budget")
    m.add_argument("--dataset", default="mnist", choices=("mnist", "cifar10"))
    m.add_argument("--calib", type=int, default=2000, help="training images for BN recalibration (0 = skip)")
    m.add_argument("--limit", type=int, default=0, help="first N test images only")
    m.add_argument("--out", help="write the model tagged with the allocation")
    m.set_defaults(func=cmd_mix)

    i = sub.add_parser("inspect", help="per-level weight histograms as tab-separated text")
    i.add_argument("model")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except MissingLayer as exc:
        print(f"error: missing enhance sections {exc.levels}", file=sys.stderr)
        return EXIT_DATA
    except (CorruptData, CorruptDataset) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, ValidationError, Infeasible, VLQError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
