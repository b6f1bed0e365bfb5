"""Command-line interface: gen / train / eval / analyze / inspect.

Exit codes: 0 success; 1 usage or configuration error; 2 data/format error
(bad files, bad checkpoints, failed generation); 3 numeric failure.

Set ``DRNET_DETERMINISTIC=1`` to force single-threaded execution with fixed
seeds for bit-reproducible runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import analysis, training
from .config import (
    PRESETS,
    ModelConfig,
    TrainConfig,
    apply_overrides,
    config_to_text,
    model_config_from_mapping,
    parse_config_text,
    preset,
    train_config_from_mapping,
)
from .data import (
    MaterializedDataset,
    MiniRpmSpec,
    RpmxFolder,
    spec_from_mapping,
    write_dataset,
)
from .errors import (
    CheckpointError,
    ConfigurationError,
    DrnetError,
    FormatError,
    GenerationError,
    NumericError,
    UsageError,
)
from .model import DRNet, parameter_counts

DETERMINISTIC_ENV = "DRNET_DETERMINISTIC"


class _Parser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of calling sys.exit."""

    def error(self, message: str):
        raise UsageError(message)


def _deterministic_requested() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "").strip().lower() in (
        "1", "true", "yes", "on",
    )


def _load_sections(args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    """Merge config file (if given) with --override flags."""
    sections: dict[str, dict[str, Any]] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FormatError(f"config file not found: {path}")
        sections = parse_config_text(path.read_text())
    apply_overrides(sections, list(getattr(args, "override", None) or []))
    return sections


def _resolve_model_config(args: argparse.Namespace, sections) -> ModelConfig:
    mapping = dict(sections.get("model", {}))
    if getattr(args, "preset", None):
        base = preset(args.preset)
        merged: dict[str, Any] = {
            f.name: getattr(base, f.name) for f in dataclasses.fields(ModelConfig)
        }
        merged.update(mapping)  # file values and overrides win over the preset
        mapping = merged
    config = model_config_from_mapping(mapping)
    config.validate()
    return config


def _render_configs(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    return config_to_text(
        {
            "model": {
                f.name: getattr(model_cfg, f.name)
                for f in dataclasses.fields(ModelConfig)
            },
            "train": {
                f.name: getattr(train_cfg, f.name)
                for f in dataclasses.fields(TrainConfig)
            },
        }
    )


def _resolve_train_config(args: argparse.Namespace, sections) -> TrainConfig:
    cfg = train_config_from_mapping(sections.get("train", {}))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if _deterministic_requested():
        cfg.deterministic = True
    cfg.validate()
    return cfg


def build_parser() -> _Parser:
    parser = _Parser(prog="drnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a mini-RPM dataset as RPMX files")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--samples", type=int, help="total sample count")
    p_gen.add_argument("--seed", type=int, help="generator seed")
    p_gen.add_argument("--image-size", type=int, help="panel side in pixels")
    p_gen.add_argument("--attributes", help="comma list, e.g. size,shade")
    p_gen.add_argument("--rules", help="comma list, e.g. constant,progression")
    p_gen.add_argument("--ratios", default="0.6,0.2,0.2", help="train,val,test")
    p_gen.add_argument("--config", help="config file with a data.* section")
    p_gen.add_argument("--override", action="append", help="data.key=value")

    p_train = sub.add_parser("train", help="train a model on an RPMX tree")
    p_train.add_argument("--data", required=True, help="dataset root directory")
    p_train.add_argument("--out", required=True, help="run output directory")
    p_train.add_argument("--config", help="config file (model.*/train.* sections)")
    p_train.add_argument("--preset", choices=sorted(PRESETS), help="model preset")
    p_train.add_argument("--override", action="append", help="section.key=value")
    p_train.add_argument("--seed", type=int, help="training seed")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True, help="dataset root directory")
    p_eval.add_argument("--split", default="test", choices=("train", "val", "test"))
    p_eval.add_argument("--batch-size", type=int, default=64)

    p_an = sub.add_parser("analyze", help="export analysis artifacts")
    p_an.add_argument("--checkpoint", required=True)
    p_an.add_argument("--data", required=True)
    p_an.add_argument(
        "--which",
        required=True,
        choices=("embeddings", "similarity", "rollout", "features"),
    )
    p_an.add_argument("--out", required=True, help="output directory")
    p_an.add_argument("--split", default="test", choices=("train", "val", "test"))
    p_an.add_argument("--limit", type=int, help="use only the first N problems")
    p_an.add_argument("--sample", type=int, default=0, help="problem index")
    p_an.add_argument(
        "--layer",
        help="rollout: transformer layer index (default: all layers); "
        "features: conv layer name, e.g. cnn.block1.conv1",
    )

    p_ins = sub.add_parser("inspect", help="print resolved config and param counts")
    p_ins.add_argument("--config", help="config file")
    p_ins.add_argument("--preset", choices=sorted(PRESETS))
    p_ins.add_argument("--override", action="append", help="section.key=value")
    return parser


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args: argparse.Namespace) -> int:
    sections = _load_sections(args)
    mapping = dict(sections.get("data", {}))
    if args.samples is not None:
        mapping["n_samples"] = args.samples
    if args.seed is not None:
        mapping["seed"] = args.seed
    if args.image_size is not None:
        mapping["image_size"] = args.image_size
    if args.attributes is not None:
        mapping["attributes"] = args.attributes
    if args.rules is not None:
        mapping["rules"] = args.rules
    spec = spec_from_mapping(mapping)
    try:
        ratios = tuple(float(x) for x in args.ratios.split(","))
    except ValueError as exc:
        raise UsageError(f"bad --ratios value {args.ratios!r}: {exc}") from exc
    if len(ratios) != 3:
        raise UsageError("--ratios needs three comma-separated numbers")
    manifest = write_dataset(spec, args.out, ratios)
    for split in ("train", "val", "test"):
        print(f"{split}: {manifest['splits'][split]} samples")
    print(f"manifest sha256: {manifest['sha256']}")
    return 0


def _open_split(root: str, split: str) -> MaterializedDataset:
    return MaterializedDataset(RpmxFolder(root, split))


def cmd_train(args: argparse.Namespace) -> int:
    sections = _load_sections(args)
    model_cfg = _resolve_model_config(args, sections)
    train_cfg = _resolve_train_config(args, sections)

    train_set = _open_split(args.data, "train")
    val_set = _open_split(args.data, "val")
    image = train_set.panels.shape[-1]
    if image != model_cfg.image_size:
        raise ConfigurationError(
            f"dataset panels are {image}x{image} but model.image_size is "
            f"{model_cfg.image_size}"
        )

    if train_cfg.deterministic:
        training.deterministic_mode(train_cfg.seed)
    else:
        training.seed_all(train_cfg.seed)
    model = DRNet(model_cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(_render_configs(model_cfg, train_cfg))
    result = training.train(model, train_set, val_set, train_cfg, out_dir=out)
    print(
        f"trained {result.epochs_run} epochs ({result.stop_reason}); "
        f"best epoch {result.best_epoch}: "
        f"val accuracy {result.best_val_accuracy:.4f}, "
        f"val loss {result.best_val_loss:.4f}"
    )
    print(f"checkpoints: {result.best_checkpoint} / {result.last_checkpoint}")
    return 0


def _load_model_from_checkpoint(path: str) -> DRNet:
    meta = training.read_checkpoint_meta(path)
    config = model_config_from_mapping(meta["model_config"])
    config.validate()
    model = DRNet(config)
    training.load_checkpoint(path, model)
    model.eval()
    return model


def cmd_eval(args: argparse.Namespace) -> int:
    model = _load_model_from_checkpoint(args.checkpoint)
    data = _open_split(args.data, args.split)
    report = training.evaluate(model, data, batch_size=args.batch_size)
    print(f"samples: {report.n}")
    print(f"loss: {report.loss:.6f}")
    print(f"accuracy: {report.accuracy:.4f}")
    if report.per_rule:
        print("per-rule accuracy:")
        for label, (correct, total) in report.per_rule.items():
            print(f"  {label}: {correct / total:.4f} ({correct}/{total})")
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    model = _load_model_from_checkpoint(args.checkpoint)
    data = _open_split(args.data, args.split)
    if args.limit is not None:
        if args.limit < 1:
            raise UsageError("--limit must be >= 1")
        data = [data[i] for i in range(min(args.limit, len(data)))]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.which == "embeddings":
        path = out / "embeddings.csv"
        rows = analysis.export_rule_embeddings(model, data, path)
        print(f"wrote {rows} embedding rows to {path}")
    elif args.which == "similarity":
        report = analysis.stream_similarity(model, data)
        path = out / "similarity.csv"
        analysis.write_similarity_csv(report, path)
        print(
            f"panels: {report.values.size} (skipped {report.skipped}); "
            f"mean {report.mean:.4f}, median {report.median:.4f}"
        )
        print(f"wrote histogram to {path}")
    elif args.which == "rollout":
        problem = data[args.sample]
        panels = analysis._problem_tensor([problem])[0]
        layer = None
        if args.layer is not None:
            try:
                layer = int(args.layer)
            except ValueError as exc:
                raise UsageError(
                    f"--layer must be an integer layer index for rollout, "
                    f"got {args.layer!r}"
                ) from exc
        maps = analysis.attention_rollout(model, panels, layer=layer)
        for k in range(maps.shape[0]):
            image = analysis.saliency_to_image(maps[k], model.config.image_size)
            analysis.write_pgm(out / f"rollout_{k:02d}.pgm", image)
        print(f"wrote {maps.shape[0]} rollout maps to {out}")
    elif args.which == "features":
        if args.layer is None:
            raise UsageError("--layer is required for --which features")
        problem = data[args.sample]
        panels = analysis._problem_tensor([problem])[:, 0]
        maps = analysis.cnn_feature_maps(model, panels, args.layer)
        images = analysis.feature_maps_to_images(maps)
        for c in range(images.shape[0]):
            analysis.write_pgm(out / f"features_{c:03d}.pgm", images[c])
        print(f"wrote {images.shape[0]} feature maps to {out}")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    sections = _load_sections(args)
    model_cfg = _resolve_model_config(args, sections)
    train_cfg = _resolve_train_config(args, sections)
    print(_render_configs(model_cfg, train_cfg), end="")
    model = DRNet(model_cfg)
    counts = parameter_counts(model)
    print("parameters:")
    for name, count in counts.items():
        if name != "total":
            print(f"  {name}: {count:,}")
    print(f"  total: {counts['total']:,}")
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "inspect": cmd_inspect,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return _COMMANDS[args.command](args)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return run(argv)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, GenerationError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DrnetError as exc:  # any other package failure: treat as data error
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
