"""Command-line entry point.

    contextflow train-generalist --config run.yaml [--out DIR] [--seed N] [key.path=value ...]
    contextflow train-specialist --config run.yaml --generalist DIR/generalist.ckpt
    contextflow eval     --config run.yaml --checkpoint CKPT
    contextflow sample   --config run.yaml --checkpoint CKPT [--n 100]
    contextflow inspect  --checkpoint CKPT

Exit codes: 0 success, 2 config error, 3 checkpoint error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import datasets as ds_mod
from .bijections import ConfigError
from .checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from .diffcore import make_rng
from .flowmodel import PRESETS, SPECIALIST_PHASE, FlowConfig, FlowModel
from .trainer import NumericalAbort, TrainConfig, evaluate, fit

log = logging.getLogger("contextflow")

EXIT_OK, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_NUMERICAL = 0, 2, 3, 4

DATA_KEYS = {
    "source": None,
    "n": 4000,
    "n_contexts": 8,
    "noise": 0.1,
    "images": None,
    "labels": None,
    "limit": None,
    "rotate": None,
    "corrupt": False,
    "path": None,
    "data_columns": None,
    "label_column": None,
    "window": None,
    "seed": 0,
    "fractions": [0.8, 0.1, 0.1],
    "fold": None,
    "n_folds": 5,
}
SOURCES = ("two_moons", "idx", "csv")
TOP_KEYS = ("model", "train", "data", "out")


class CliConfigError(Exception):
    pass


# --------------------------------------------------------------------------
# config


def _set_dotted(cfg: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p, {}), dict):
            raise CliConfigError(f"override {key!r}: {p!r} is not a section")
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise CliConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(raw)
    except yaml.YAMLError as err:
        raise CliConfigError(f"override {key!r}: cannot parse value ({err})") from None


def load_run_config(path: str | None, overrides: list[str] = (), seed: int | None = None,
                    out: str | None = None) -> dict[str, Any]:
    raw: dict[str, Any] = {}
    if path:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as err:
            raise CliConfigError(f"{path}: cannot read config ({err.strerror})") from None
        except yaml.YAMLError as err:
            raise CliConfigError(f"{path}: invalid YAML ({err})") from None
        if not isinstance(raw, dict):
            raise CliConfigError(f"{path}: top level must be a mapping")
    raw = copy.deepcopy(raw)
    for item in overrides:
        _set_dotted(raw, *parse_override(item))
    if seed is not None:
        _set_dotted(raw, "train.seed", seed)
        _set_dotted(raw, "model.seed", seed)
        _set_dotted(raw, "data.seed", seed)
    if out is not None:
        raw["out"] = out
    return validate_run_config(raw)


def _check_keys(section: dict, allowed, where: str) -> None:
    if not isinstance(section, dict):
        raise CliConfigError(f"{where}: must be a mapping")
    for key in section:
        if key not in allowed:
            raise CliConfigError(f"unknown config key {where}.{key}")


def _coerce_floats(section: dict, cls, where: str) -> dict:
    """YAML 1.1 reads ``5e-4`` as a string; accept it for float fields."""
    out = dict(section)
    for f in dataclasses.fields(cls):
        val = out.get(f.name)
        if isinstance(val, str) and str(f.type).startswith("float"):
            try:
                out[f.name] = float(val)
            except ValueError:
                raise CliConfigError(f"{where}.{f.name}: expected a number, got {val!r}") from None
    return out


def validate_run_config(raw: dict[str, Any]) -> dict[str, Any]:
    """Check every key and build the typed sections; errors name the offending key."""
    _check_keys(raw, TOP_KEYS, "<root>")
    model = dict(raw.get("model") or {})
    preset = model.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise CliConfigError(f"model.preset: unknown preset {preset!r} (choose from {sorted(PRESETS)})")
        model = {**PRESETS[preset], **model}
    _check_keys(model, set(FlowConfig.__dataclass_fields__), "model")
    model = _coerce_floats(model, FlowConfig, "model")
    try:
        model_cfg = FlowConfig(**model)
        model_cfg.context_spec
    except (ConfigError, ValueError, TypeError) as err:
        raise CliConfigError(f"model: {err}") from None
    train = dict(raw.get("train") or {})
    _check_keys(train, set(TrainConfig.__dataclass_fields__), "train")
    train = _coerce_floats(train, TrainConfig, "train")
    try:
        train_cfg = TrainConfig(**train)
    except (ValueError, TypeError) as err:
        raise CliConfigError(f"train: {err}") from None
    data = dict(raw.get("data") or {})
    _check_keys(data, DATA_KEYS, "data")
    data = {**DATA_KEYS, **data}
    if data["source"] not in SOURCES:
        raise CliConfigError(f"data.source: must be one of {SOURCES}, got {data['source']!r}")
    if data["source"] == "idx" and not data["images"]:
        raise CliConfigError("data.images: required for source 'idx'")
    if data["source"] == "csv" and not data["path"]:
        raise CliConfigError("data.path: required for source 'csv'")
    return {"model": model_cfg, "train": train_cfg, "data": data, "out": raw.get("out") or "runs"}


def dump_effective(cfg: dict[str, Any], path: Path) -> None:
    doc = {
        "model": cfg["model"].to_dict(),
        "train": cfg["train"].to_dict(),
        "data": cfg["data"],
        "out": str(cfg["out"]),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(doc, sort_keys=True))


# --------------------------------------------------------------------------
# data


def build_splits(data: dict[str, Any], model_cfg: FlowConfig) -> dict[str, ds_mod.Dataset]:
    seed = int(data["seed"])
    src = data["source"]
    try:
        if src == "two_moons":
            full = ds_mod.two_moons_context(int(data["n"]), int(data["n_contexts"]), make_rng(seed), data["noise"])
        elif src == "idx":
            x = ds_mod.load_idx(data["images"])
            y = ds_mod.load_idx(data["labels"]) if data["labels"] else None
            if data["limit"]:
                x = x[: data["limit"]]
                y = None if y is None else y[: data["limit"]]
            full = ds_mod.Dataset(x, {}, y)
        else:
            full = ds_mod.load_csv(data["path"], data["data_columns"], model_cfg.context_spec, data["label_column"])
            if data["window"]:
                full = ds_mod.Dataset(ds_mod.sliding_windows(full.data, int(data["window"])),
                                      full.contexts, full.labels)
    except OSError as err:
        raise CliConfigError(f"data: cannot read {err.filename} ({err.strerror})") from None
    except ds_mod.ParseError as err:
        raise CliConfigError(f"data: {err}") from None
    splits = ds_mod.split_dataset(full, seed, tuple(data["fractions"]), data["fold"], data["n_folds"])
    if src == "idx" and (data["rotate"] or data["corrupt"]):
        # independent context draws per split
        for i, name in enumerate(("train", "val", "test")):
            part = splits[name]
            rng = make_rng([seed, i])
            if data["rotate"]:
                new = ds_mod.rotate_context(part.data, int(data["rotate"]), rng, part.labels)
            else:
                new = ds_mod.corrupt_context(part.data, rng, part.labels)
            new.split = name
            splits[name] = new
    return splits


# --------------------------------------------------------------------------
# commands


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path: str | None, flag: str, generalist: str | None = None) -> FlowModel:
    if not path:
        raise CliConfigError(f"{flag} is required for this command")
    if not Path(path).exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    return load_checkpoint(path, generalist)


def _task(model: FlowModel) -> str:
    return "classify" if model.head.classes > 1 else "detect"


def cmd_train_generalist(args, cfg) -> int:
    out = _out_dir(cfg)
    dump_effective(cfg, out / "effective_config.yaml")
    splits = build_splits(cfg["data"], cfg["model"])
    model = FlowModel(cfg["model"])
    train_cfg = dataclasses.replace(cfg["train"], phase="generalist")
    fit(model, splits["train"], train_cfg, splits["val"], out / "generalist_log.csv", out / "generalist.ckpt")
    save_checkpoint(model, out / "generalist.ckpt")
    rep = evaluate(model, splits["test"], _task(model), splits["val"], seed=train_cfg.seed)
    print(rep.table())
    return EXIT_OK


def cmd_train_specialist(args, cfg) -> int:
    if not args.generalist:
        raise CliConfigError("train-specialist requires --generalist <checkpoint>")
    out = _out_dir(cfg)
    dump_effective(cfg, out / "effective_config.yaml")
    model = _load(args.generalist, "--generalist")
    if model.phase == SPECIALIST_PHASE:
        raise CliConfigError(f"{args.generalist}: already a specialist checkpoint")
    if model.config.conditioning != "additive":
        raise CliConfigError(f"{args.generalist}: model.conditioning must be 'additive' to attach a specialist")
    model.attach_specialist(cfg["model"].context_spec)
    splits = build_splits(cfg["data"], model.config)
    train_cfg = dataclasses.replace(cfg["train"], phase=SPECIALIST_PHASE)
    fit(model, splits["train"], train_cfg, splits["val"], out / "specialist_log.csv", out / "specialist.ckpt")
    save_checkpoint(model, out / "specialist.ckpt")
    rep = evaluate(model, splits["test"], _task(model), splits["val"], seed=train_cfg.seed)
    print(rep.table())
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    model = _load(args.checkpoint, "--checkpoint", args.generalist)
    out = _out_dir(cfg)
    splits = build_splits(cfg["data"], model.config)
    rep = evaluate(model, splits["test"], _task(model), splits["val"], seed=cfg["train"].seed)
    print(rep.table())
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rep.as_dict()))
        w.writeheader()
        w.writerow({k: "undefined" if v is None else v for k, v in rep.as_dict().items()})
    return EXIT_OK


def cmd_sample(args, cfg) -> int:
    model = _load(args.checkpoint, "--checkpoint", args.generalist)
    out = _out_dir(cfg)
    rng = make_rng(cfg["train"].seed)
    context = None
    if model.uses_context:
        test = build_splits(cfg["data"], model.config)["test"]
        idx = rng.integers(0, len(test), size=args.n)
        context = {k: v[idx] for k, v in test.contexts.items()}
    x = model.sample(args.n, context, rng)
    if len(model.config.input_shape) == 3 and model.config.input_shape[0] == 1:
        path = ds_mod.write_idx(out / "samples.idx", np.clip(x, 0, 255))
    else:
        flat = x.reshape(len(x), -1)
        cols = {f"x{i}": flat[:, i] for i in range(flat.shape[1])}
        for k, v in (context or {}).items():
            cols[k] = v
        path = ds_mod.write_csv(out / "samples.csv", cols)
    print(f"wrote {len(x)} samples to {path}")
    return EXIT_OK


def cmd_inspect(args, cfg) -> int:
    if not args.checkpoint:
        raise CliConfigError("inspect requires --checkpoint")
    model = _load(args.checkpoint, "--checkpoint")
    header = read_header(args.checkpoint)
    census = model.census()
    print(f"phase        {header['phase']}")
    print(f"fingerprint  {header['generalist_fingerprint'][:16]}")
    rows = [("generalist", census["generalist"])]
    if model.phase == SPECIALIST_PHASE:
        rows.append(("specialist", census["specialist"]))
    for name, count in rows:
        print(f"{name:<12} {count:>10d}")
    return EXIT_OK


COMMANDS = {
    "train-generalist": cmd_train_generalist,
    "train-specialist": cmd_train_specialist,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "inspect": cmd_inspect,
}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contextflow", description="Context-conditional normalizing flows.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("overrides", nargs="*", help="dotted overrides, e.g. train.lr_init=5e-4")
    p.add_argument("--config")
    p.add_argument("--generalist")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, default=100, help="number of samples for 'sample'")
    return p


def _setup_logging() -> None:
    level = os.environ.get("CONTEXTFLOW_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "error"
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def run(argv: list[str] | None = None) -> int:
    _setup_logging()
    try:
        args = make_parser().parse_intermixed_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    try:
        if args.command == "train-specialist" and not args.generalist:
            raise CliConfigError("train-specialist requires --generalist <checkpoint>")
        if args.command == "inspect" and not args.config:
            cfg = None
        else:
            if not args.config:
                raise CliConfigError("--config is required for this command")
            cfg = load_run_config(args.config, args.overrides, args.seed, args.out)
        return COMMANDS[args.command](args, cfg)
    except CliConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as err:
        print(f"checkpoint error: {err}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericalAbort as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
