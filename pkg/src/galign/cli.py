"""Command-line entry point: gen-data, train, ground, eval.

Every command reads one JSON config file merged over built-in defaults,
applies flag overrides on top (flags always win), echoes the fully
resolved config into the output directory, and funnels all randomness
through the single top-level seed.  Exit codes: 0 success, 2 config
problem, 3 I/O failure, 4 bad data.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import (
    ConfigError,
    DataError,
    DomainError,
    ParameterError,
    ShapeError,
)
from .grounding import (
    DEFAULT_THRESHOLDS,
    argmax_patch,
    evaluate,
    ground,
    heatmap_to_pgm,
    mask_to_pgm,
    threshold_mask,
)
from .losses import LossConfig
from .synthbench import SynthSpec, generate, load_dataset, write_dataset
from .trainer import (
    Checkpoint,
    ModelConfig,
    TrainConfig,
    train,
    write_loss_log,
)
from .visenc import ImageSample

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4

log = logging.getLogger("galign")


# -- configuration ----------------------------------------------------------


def default_run_config() -> dict:
    """The full config tree with every default filled in."""
    spec = SynthSpec()
    tc = TrainConfig()
    return {
        "seed": 0,
        "data": {
            "image_size": spec.image_size,
            "shapes": list(spec.shapes),
            "positions": list(spec.positions),
            "sizes": list(spec.sizes),
            "lesions_per_image": list(spec.lesions_per_image),
            "noise": spec.noise,
            "train_count": spec.train_count,
            "test_count": spec.test_count,
        },
        "train": {
            "lr0": tc.lr0,
            "beta1": tc.beta1,
            "beta2": tc.beta2,
            "eps": tc.eps,
            "decay": tc.decay,
            "batch_size": tc.batch_size,
            "epochs": tc.epochs,
        },
        "loss": {
            "tau1": tc.loss.tau1,
            "tau2": tc.loss.tau2,
            "tau3": tc.loss.tau3,
            "strict_eq4_log": tc.loss.strict_eq4_log,
        },
        "model": {
            "dim": tc.model.dim,
            "patch_size": tc.model.patch_size,
            "text_hidden": tc.model.text_hidden,
            "vision_hidden": tc.model.vision_hidden,
            "table_init_scale": tc.model.table_init_scale,
        },
        "eval": {
            "thresholds": list(DEFAULT_THRESHOLDS),
            "method": "bilinear",
            "split": "test",
        },
    }


def _merge_into(base: dict, override: dict, trail: str) -> None:
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key: {trail}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {trail}{key} must be an object")
            _merge_into(base[key], value, f"{trail}{key}.")
        else:
            base[key] = value


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then flag overrides."""
    cfg = default_run_config()
    config_path = getattr(args, "config", None)
    if config_path:
        text = Path(config_path).read_text(encoding="utf-8")
        try:
            file_cfg = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{config_path}: invalid JSON: {err}") from err
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{config_path}: top level must be an object")
        _merge_into(cfg, file_cfg, "")

    overrides = {
        "seed": ("seed",),
        "epochs": ("train", "epochs"),
        "batch": ("train", "batch_size"),
        "lr": ("train", "lr0"),
        "decay": ("train", "decay"),
        "tau1": ("loss", "tau1"),
        "tau2": ("loss", "tau2"),
        "tau3": ("loss", "tau3"),
        "thresholds": ("eval", "thresholds"),
        "method": ("eval", "method"),
        "split": ("eval", "split"),
    }
    for flag, path in overrides.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        node = cfg
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
    return cfg


def _synth_spec(cfg: dict) -> SynthSpec:
    data = cfg["data"]
    return SynthSpec(
        image_size=data["image_size"],
        shapes=tuple(data["shapes"]),
        positions=tuple(data["positions"]),
        sizes=tuple(data["sizes"]),
        lesions_per_image=tuple(data["lesions_per_image"]),
        noise=data["noise"],
        train_count=data["train_count"],
        test_count=data["test_count"],
        seed=cfg["seed"],
    )


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        **cfg["train"],
        seed=cfg["seed"],
        loss=LossConfig(**cfg["loss"]),
        model=ModelConfig(**cfg["model"]),
    )


def _echo_config(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    spec = _synth_spec(cfg)
    out = Path(args.out)
    train_samples, test_samples, vocab = generate(spec)
    write_dataset(out, train_samples, test_samples, vocab, spec)
    _echo_config(cfg, out)
    log.info(
        "wrote %d train + %d test samples to %s",
        len(train_samples),
        len(test_samples),
        out,
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    tc = _train_config(cfg)
    train_samples, _, vocab = load_dataset(args.data)
    pairs = [(s.image, s.report) for s in train_samples]
    resume = Checkpoint.load(args.resume) if args.resume else None
    ckpt, logs = train(pairs, vocab, tc, resume=resume)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save(out / "ckpt.bin")
    write_loss_log(logs, out / "losses.jsonl")
    _echo_config(cfg, out)
    if logs:
        log.info("trained %d epochs, final total loss %.6f", len(logs), logs[-1].total)
    return EXIT_OK


def cmd_ground(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if not args.sentence.strip():
        raise ConfigError("sentence must not be empty")
    image_path = Path(args.image)
    if not image_path.is_file():
        raise DataError(f"image not found: {image_path}")
    ckpt = Checkpoint.load(args.ckpt)
    image = ImageSample.from_pgm(image_path)
    smap = ground(args.sentence, image, ckpt, method=cfg["eval"]["method"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    heatmap_to_pgm(smap, out / "heatmap.pgm")
    for t in cfg["eval"]["thresholds"]:
        mask_to_pgm(threshold_mask(smap, t), out / f"mask_{t:g}.pgm")
    _echo_config(cfg, out)
    log.info(
        "peak similarity %.4f at patch %s", smap.grid.max(), argmax_patch(smap)
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    split = cfg["eval"]["split"]
    if split not in ("train", "test"):
        raise ConfigError(f"eval split must be 'train' or 'test', got {split!r}")
    ckpt = Checkpoint.load(args.ckpt)
    train_samples, test_samples, _ = load_dataset(args.data)
    samples = train_samples if split == "train" else test_samples
    metrics = evaluate(
        samples,
        ckpt,
        thresholds=cfg["eval"]["thresholds"],
        method=cfg["eval"]["method"],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(
        json.dumps(metrics.to_json_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    _echo_config(cfg, out)
    print(f"mean_iou {metrics.mean_iou:.6f}")
    print(f"mean_dice {metrics.mean_dice:.6f}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


def _thresholds_arg(text: str) -> list[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from err
    if not values:
        raise argparse.ArgumentTypeError("threshold list is empty")
    return values


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file merged over defaults")
    parser.add_argument("--seed", type=int, help="master seed for data and training")
    parser.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="galign",
        description="Train and evaluate paired image-text grounding models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay", type=float)
    p.add_argument("--tau1", type=float)
    p.add_argument("--tau2", type=float)
    p.add_argument("--tau3", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ground", help="localize a sentence in one image")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--image", required=True, help="input PGM image")
    p.add_argument("--sentence", required=True, help="query text")
    p.add_argument("--method", choices=("bilinear", "nearest"))
    p.add_argument("--thresholds", type=_thresholds_arg)
    p.set_defaults(func=cmd_ground)

    p = sub.add_parser("eval", help="score a checkpoint against a dataset")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--method", choices=("bilinear", "nearest"))
    p.add_argument("--thresholds", type=_thresholds_arg)
    p.set_defaults(func=cmd_eval)

    return parser


def _setup_logging() -> None:
    name = os.environ.get("GALN_LOG", "error").strip().lower()
    levels = {
        "error": logging.ERROR,
        "info": logging.INFO,
        "debug": logging.DEBUG,
    }
    if name not in levels:
        raise ConfigError(
            f"GALN_LOG must be one of error, info, debug; got {name!r}"
        )
    logging.basicConfig(
        level=levels[name],
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    try:
        _setup_logging()
        return args.func(args)
    except (ConfigError, ParameterError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except (DataError, ShapeError, DomainError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
