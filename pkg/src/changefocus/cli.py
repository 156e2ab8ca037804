"""Command-line entry point.

    changefocus <command> [--config FILE] [--set key=value ...] [--data-root DIR]
                          [--run-dir DIR] [--seed N] [command options]

Commands: prepare, train, eval, predict, ablate, sweep-lr, heatmap, count.
Config files are either YAML (nested sections ``model``, ``train``,
``data``, ``run``) or flat ``section.key = value`` lines. Without a data
root, runs use the built-in synthetic generator.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from PIL import Image

from . import __version__
from .accounting import REFERENCE_FLOPS_G, REFERENCE_PARAMS_M, count_params_flops
from .config import ModelConfig, TrainConfig, from_dict, to_dict
from .data import (
    DatasetSplit,
    load_pair_dataset,
    save_pair_dataset,
    split_dataset,
    synthesize_dataset,
    tile_pair,
)
from .errors import ChangeFocusError, ConfigError
from .heatmaps import emit_stage_heatmaps
from .train import Checkpoint, evaluate, format_table, lr_sweep, predict_probs, train

log = logging.getLogger("changefocus")

VARIANTS = ("full", "no-pefm", "no-dcfm", "alpha", "beta")


@dataclass
class DataConfig:
    root: Optional[str] = None
    split_manifest: Optional[str] = None
    ratios: tuple[int, ...] = (7, 2, 1)
    split_seed: int = 0
    n_train: int = 16
    n_val: int = 4
    n_test: int = 8
    size: int = 128
    change_rate: float = 0.5
    synthetic_seed: int = 1
    tile: int = 256
    tile_mode: str = "grid"
    crops_per_image: int = 4


@dataclass
class RunSection:
    name: str = "default"
    dir: Optional[str] = None
    preset: str = "default"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunSection = field(default_factory=RunSection)

    @property
    def run_dir(self) -> Path:
        return Path(self.run.dir) if self.run.dir else Path("runs") / self.run.name


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "run": RunSection}
_FLAT_LINE = re.compile(r"^\s*([A-Za-z_][\w.\-]*)\s*=\s*(.*)$")


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _nest(flat: dict) -> dict:
    out: dict = {}
    for key, value in flat.items():
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"config key {key!r} conflicts with a scalar value")
        node[parts[-1]] = value
    return out


def _parse_value(text: str):
    try:
        return yaml.safe_load(text) if text.strip() else None
    except yaml.YAMLError:
        return text.strip()


def read_config_file(path) -> dict:
    """Flat ``key=value`` mapping from a YAML or key=value config file."""
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if lines and all(_FLAT_LINE.match(ln) for ln in lines):
        return {m.group(1): _parse_value(m.group(2)) for m in map(_FLAT_LINE.match, lines)}
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return _flatten(data)


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        m = _FLAT_LINE.match(item)
        if not m:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        out[m.group(1)] = _parse_value(m.group(2))
    return out


def parse_config(file=None, overrides=(), echo_to=None) -> RunConfig:
    """Effective run config: defaults <- file <- overrides, fully validated."""
    flat = read_config_file(file) if file else {}
    flat.update(parse_overrides(overrides) if not isinstance(overrides, dict) else overrides)
    for key in flat:
        section = key.split(".", 1)[0]
        if section not in SECTIONS or "." not in key:
            raise ConfigError(f"unknown config key {key!r}")
    nested = _nest(flat)
    try:
        run = from_dict(RunSection, nested.get("run", {}), prefix="run.")
        if run.preset not in ("default", "tiny"):
            raise ConfigError(f"run.preset must be 'default' or 'tiny', got {run.preset!r}")
        base = to_dict(ModelConfig.tiny() if run.preset == "tiny" else ModelConfig())
        model_dict = _nest({**_flatten(base), **_flatten(nested.get("model", {}))})
        cfg = RunConfig(
            model=from_dict(ModelConfig, model_dict, prefix="model."),
            train=from_dict(TrainConfig, nested.get("train", {}), prefix="train."),
            data=from_dict(DataConfig, nested.get("data", {}), prefix="data."),
            run=run,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.model.validate()
    cfg.train.validate()
    validate_data(cfg.data)
    if echo_to is not None:
        write_echo(cfg, echo_to)
    return cfg


def validate_data(d: DataConfig) -> None:
    if len(d.ratios) != 3 or any(r <= 0 for r in d.ratios):
        raise ConfigError("data.ratios must be three positive integers")
    if d.size < 32 or d.size % 32:
        raise ConfigError("data.size must be a positive multiple of 32")
    if not 0 <= d.change_rate <= 1:
        raise ConfigError("data.change_rate must lie in [0, 1]")
    if min(d.n_train, d.n_val, d.n_test) < 0:
        raise ConfigError("data.n_* must be nonnegative")
    if d.tile_mode not in ("grid", "random"):
        raise ConfigError("data.tile_mode must be 'grid' or 'random'")


def echo_lines(cfg: RunConfig) -> list[str]:
    flat = _flatten({name: to_dict(getattr(cfg, name)) for name in SECTIONS})
    return [f"{k} = {json.dumps(v)}" for k, v in sorted(flat.items())]


def write_echo(cfg: RunConfig, run_dir) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.echo"
    path.write_text("\n".join(echo_lines(cfg)) + "\n")
    return path


# ---------------------------------------------------------------------------
# datasets for a run


def load_splits(cfg: RunConfig):
    """(train, val, test) pair lists from the data root or the synthetic generator."""
    d = cfg.data
    if d.root is None:
        return (
            synthesize_dataset(d.n_train, d.size, d.synthetic_seed, d.change_rate),
            synthesize_dataset(d.n_val, d.size, d.synthetic_seed + 1, d.change_rate),
            synthesize_dataset(d.n_test, d.size, d.synthetic_seed + 2, d.change_rate),
        )
    pairs = {p.id: p for p in load_pair_dataset(d.root)}
    manifest = Path(d.split_manifest) if d.split_manifest else Path(d.root) / "split.json"
    if manifest.is_file():
        split = DatasetSplit.load(manifest)
    else:
        split = split_dataset(sorted(pairs), tuple(d.ratios), d.split_seed)
    missing = [i for i in split.train + split.val + split.test if i not in pairs]
    if missing:
        raise ConfigError(f"split manifest names unknown pair ids, e.g. {missing[:3]}")
    return [pairs[i] for i in split.train], [pairs[i] for i in split.val], [pairs[i] for i in split.test]


def _checkpoint_for(cfg: RunConfig, explicit: Optional[str]) -> Checkpoint:
    path = Path(explicit) if explicit else cfg.run_dir / "checkpoint.bin"
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return Checkpoint.load(path)


def error_overlay(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """RGB map: hits white, misses (FN) green, spurious (FP) red, background black."""
    pred, gt = pred.astype(bool), gt.astype(bool)
    out = np.zeros((*pred.shape, 3), dtype=np.uint8)
    out[pred & gt] = (255, 255, 255)
    out[~pred & gt] = (0, 255, 0)
    out[pred & ~gt] = (255, 0, 0)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    if args.synthetic:
        pairs = synthesize_dataset(args.synthetic, cfg.data.size, cfg.data.synthetic_seed, cfg.data.change_rate)
    else:
        if cfg.data.root is None:
            raise ConfigError("prepare needs --data-root or --synthetic N")
        pairs = []
        for k, pair in enumerate(load_pair_dataset(cfg.data.root)):
            pairs.extend(tile_pair(pair, cfg.data.tile, cfg.data.tile_mode, cfg.data.crops_per_image,
                                   seed=cfg.data.split_seed + k))
    save_pair_dataset(pairs, out)
    split = split_dataset([p.id for p in pairs], tuple(cfg.data.ratios), cfg.data.split_seed)
    split.save(out / "split.json")
    print(f"wrote {len(pairs)} pairs to {out} (train {len(split.train)} / val {len(split.val)} / test {len(split.test)})")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    run_dir = cfg.run_dir
    write_echo(cfg, run_dir)
    tr, va, te = load_splits(cfg)
    result = train(cfg.model, cfg.train, tr, va or None, log_path=run_dir / "log.csv",
                   checkpoint_path=run_dir / "checkpoint.bin")
    report = evaluate(result.checkpoint, te or va or tr)
    (run_dir / "metrics.json").write_text(json.dumps(report, indent=2))
    print(f"best epoch {result.checkpoint.epoch}: val F1 {result.checkpoint.best_val_f1:.4f}; "
          f"test F1 {report['f1']:.4f} IoU {report['iou']:.4f}; final loss {result.final_loss:.4f}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpt = _checkpoint_for(cfg, args.checkpoint)
    _, va, te = load_splits(cfg)
    report = evaluate(ckpt, te or va)
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    (cfg.run_dir / "metrics.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    ckpt = _checkpoint_for(cfg, args.checkpoint)
    model = ckpt.build_model()
    _, va, te = load_splits(cfg)
    pairs = te or va
    out = cfg.run_dir / "predictions"
    out.mkdir(parents=True, exist_ok=True)
    probs = predict_probs(model, pairs)
    for pair, prob in zip(pairs, probs):
        mask = (prob[0] > model.cfg.threshold).astype(np.uint8)
        Image.fromarray(mask * 255).save(out / f"{pair.id}_mask.png")
        if pair.label is not None:
            Image.fromarray(error_overlay(mask, pair.label[0])).save(out / f"{pair.id}_overlay.png")
    print(f"wrote predictions for {len(pairs)} pairs to {out}")
    return 0


def _variant_list(text: Optional[str]) -> list[str]:
    names = [v.strip() for v in text.split(",")] if text else ["full", "no-pefm", "no-dcfm", "alpha", "beta"]
    bad = [v for v in names if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variants {bad}; choose from {VARIANTS}")
    return names


def cmd_ablate(args, cfg: RunConfig) -> int:
    tr, va, te = load_splits(cfg)
    rows = []
    for name in _variant_list(args.variants):
        mcfg = cfg.model.with_variant(name)
        result = train(mcfg, cfg.train, tr, va or None)
        report = evaluate(result.checkpoint, te or va)
        rows.append({"variant": name, **{k: report[k] for k in ("f1", "iou", "precision", "recall")}})
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    (cfg.run_dir / "ablation.json").write_text(json.dumps(rows, indent=2))
    table = format_table(rows, key="variant")
    (cfg.run_dir / "ablation.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_sweep(args, cfg: RunConfig) -> int:
    lrs = [float(v) for v in args.lrs.split(",")]
    tr, va, te = load_splits(cfg)
    rows = lr_sweep(lrs, cfg.model, cfg.train, tr, va, te or None)
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    (cfg.run_dir / "sweep.json").write_text(json.dumps(rows, indent=2))
    table = format_table(rows)
    (cfg.run_dir / "sweep.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_heatmap(args, cfg: RunConfig) -> int:
    ckpt = _checkpoint_for(cfg, args.checkpoint)
    _, va, te = load_splits(cfg)
    pairs = te or va
    if not 0 <= args.index < len(pairs):
        raise ConfigError(f"pair index {args.index} out of range (0..{len(pairs) - 1})")
    pair = pairs[args.index]
    out = Path(args.out) if args.out else cfg.run_dir / "heatmaps" / pair.id
    paths = emit_stage_heatmaps(ckpt.build_model(), pair, out)
    print(f"wrote {len(paths)} heatmaps to {out}")
    return 0


def cmd_count(args, cfg: RunConfig) -> int:
    size = args.input_size
    res = count_params_flops(cfg.model, (size, size))
    print(f"params {res['params']} ({res['params'] / 1e6:.2f} M)")
    print(f"flops {res['flops']} ({res['flops'] / 1e9:.2f} G MACs at {size}x{size})")
    print(f"reference (published full model): {REFERENCE_PARAMS_M} M params, {REFERENCE_FLOPS_G} G FLOPs")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "sweep-lr": cmd_sweep,
    "heatmap": cmd_heatmap,
    "count": cmd_count,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or key=value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (repeatable)")
    common.add_argument("--data-root", help="dataset root with A/, B/, label/")
    common.add_argument("--run-dir", help="output directory (default runs/<run.name>)")
    common.add_argument("--seed", type=int, help="training seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="changefocus", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("prepare", parents=[common], help="tile and split a dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--synthetic", type=int, default=0, metavar="N", help="generate N synthetic pairs instead")
    sub.add_parser("train", parents=[common], help="train a model")
    for name, helptext in (("eval", "evaluate a checkpoint"), ("predict", "write masks and error overlays")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint")
    p = sub.add_parser("ablate", parents=[common], help="train and compare ablation variants")
    p.add_argument("--variants", help=f"comma list from {','.join(VARIANTS)}")
    p = sub.add_parser("sweep-lr", parents=[common], help="learning-rate sensitivity sweep")
    p.add_argument("--lrs", default="1e-5,1e-4,5e-4,1e-3,5e-3")
    p = sub.add_parser("heatmap", parents=[common], help="emit stage heatmaps for one pair")
    p.add_argument("--checkpoint")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out")
    p = sub.add_parser("count", parents=[common], help="print parameter and FLOP counts")
    p.add_argument("--input-size", type=int, default=256)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = parse_overrides(args.overrides)
        if args.data_root:
            overrides["data.root"] = args.data_root
        if args.run_dir:
            overrides["run.dir"] = args.run_dir
        if args.seed is not None:
            overrides["train.seed"] = args.seed
        cfg = parse_config(args.config, overrides)
        return COMMANDS[args.command](args, cfg)
    except (ChangeFocusError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())
