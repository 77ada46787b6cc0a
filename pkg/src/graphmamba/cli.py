"""Command-line front-end: ``graphmamba {synth,train,eval,predict,estimate}``.

Run configuration lives in a flat INI-style file::

    [data]
    cube = scene.hsic
    train_fraction = 0.1

    [model]
    patch_size = 5

    [train]
    epochs = 50

Any key can be overridden with ``--set key=value`` (or ``section.key=value``).
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from graphmamba.data import (
    HsiCube,
    extract_patches,
    generate_synthetic,
    load_cube,
    normalize_bands,
    save_cube,
    stratified_split,
)
from graphmamba.errors import (
    ArgumentError,
    CheckpointError,
    ConfigError,
    CubeFormatError,
    DimensionError,
    NonFiniteError,
    SplitError,
)
from graphmamba.model import ModelConfig, load_checkpoint, save_checkpoint
from graphmamba.ppm import write_ppm
from graphmamba.resources import estimate_memory
from graphmamba.training import Metrics, TrainConfig, confusion_matrix, predict_labels, predict_map, train

log = logging.getLogger("graphmamba")

EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_CHECKPOINT = 4
EXIT_DIMENSION = 5
EXIT_SPLIT = 6
EXIT_NONFINITE = 7
EXIT_IO = 8


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "cube": (str, None),
        "stride": (int, 1),
        "train_fraction": (float, 0.1),
        "split_seed": (int, 0),
        "normalize": (_bool, True),
    },
    "model": {
        "bands": (_opt_int, None),
        "classes": (_opt_int, None),
        "patch_size": (int, 7),
        "feature_dim": (int, 64),
        "model_dim": (int, 128),
        "n_spectral_tokens": (_opt_int, None),
        "n_priority": (_opt_int, None),
    },
    "train": {
        "epochs": (int, 50),
        "batch_size": (int, 56),
        "learning_rate": (float, 0.001),
        "l2": (float, 0.01),
        "seed": (int, 0),
        "precision": (str, "float32"),
    },
}
_SECTION_OF = {key: sec for sec, keys in SCHEMA.items() for key in keys}


@dataclass
class RunConfig:
    values: dict[str, object] = field(
        default_factory=lambda: {k: d for keys in SCHEMA.values() for k, (_, d) in keys.items()}
    )

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, raw: str, section: str | None = None) -> None:
        if "." in key and section is None:
            section, key = key.split(".", 1)
        if key not in _SECTION_OF:
            raise ConfigError(f"unknown config key {key!r}")
        if section is not None and _SECTION_OF[key] != section:
            raise ConfigError(f"key {key!r} does not belong to section [{section}]")
        parse = SCHEMA[_SECTION_OF[key]][key][0]
        try:
            self.values[key] = parse(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc

    @classmethod
    def load(cls, path: str | None, overrides: list[str]) -> "RunConfig":
        cfg = cls()
        if path:
            parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
            try:
                with open(path) as fh:
                    parser.read_file(fh)
            except configparser.Error as exc:
                raise ConfigError(f"{path}: {exc}") from exc
            for section in parser.sections():
                if section not in SCHEMA:
                    raise ConfigError(f"{path}: unknown section [{section}]")
                for key, raw in parser.items(section):
                    cfg.set(key, raw, section)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, raw = item.split("=", 1)
            cfg.set(key.strip(), raw.strip())
        return cfg

    def model_config(self, bands: int | None = None, n_classes: int | None = None) -> ModelConfig:
        bands = self["bands"] or bands
        n_classes = self["classes"] or n_classes
        if bands is None or n_classes is None:
            raise ConfigError("bands and classes must be given in [model] when no cube is supplied")
        return ModelConfig(
            bands=bands,
            n_classes=n_classes,
            patch_size=self["patch_size"],
            feature_dim=self["feature_dim"],
            model_dim=self["model_dim"],
            n_spectral_tokens=self["n_spectral_tokens"],
            n_priority=self["n_priority"],
            l2=self["l2"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self["epochs"],
            batch_size=self["batch_size"],
            learning_rate=self["learning_rate"],
            l2=self["l2"],
            seed=self["seed"],
            precision=self["precision"],
        )


def _thread_limit(deterministic: bool):
    if deterministic:
        return threadpool_limits(1)
    cap = os.environ.get("GRAPHMAMBA_THREADS")
    if cap:
        return threadpool_limits(int(cap))
    return contextlib.nullcontext()


def _prepare(cube: HsiCube, patch_size: int, stride: int, normalize: bool):
    values = normalize_bands(cube.values) if normalize else cube.values
    return extract_patches(HsiCube(values, cube.labels, cube.n_classes), patch_size, stride)


def _write_text(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_synth(args) -> int:
    if args.noise < 0:
        args.parser.error(f"--noise must be non-negative, got {args.noise}")
    cube = generate_synthetic(args.height, args.width, args.bands, args.classes, args.noise, args.seed)
    save_cube(cube, args.out)
    log.info("wrote %dx%dx%d cube with %d classes to %s", *cube.values.shape, cube.n_classes, args.out)
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, args.set)
    if args.seed is not None:
        cfg.values["seed"] = args.seed
    cube_path = args.cube or cfg["cube"]
    if not cube_path:
        raise ConfigError("no cube given (positional argument or [data] cube)")
    cube = load_cube(cube_path)
    if cube.labels is None:
        raise ArgumentError(f"{cube_path}: training needs a labeled cube")
    model_cfg = cfg.model_config(cube.bands, cube.n_classes)
    train_cfg = cfg.train_config()
    ps = _prepare(cube, model_cfg.patch_size, cfg["stride"], cfg["normalize"])
    split = stratified_split(ps, cfg["train_fraction"], cfg["split_seed"])
    tr, te = split.train, split.test
    eval_set = (ps.patches[te], ps.labels[te] - 1) if len(te) else None
    params, history = train(ps.patches[tr], ps.labels[tr] - 1, model_cfg, train_cfg, eval_set=eval_set)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "stride": cfg["stride"],
        "train_fraction": cfg["train_fraction"],
        "split_seed": cfg["split_seed"],
        "normalize": cfg["normalize"],
    }
    save_checkpoint(out / "checkpoint.gmck", params, model_cfg, meta)
    (out / "history.csv").write_text(history.to_csv())
    idx = te if len(te) else tr
    pred = predict_labels(params, ps.patches[idx], model_cfg)
    metrics = Metrics(confusion_matrix(ps.labels[idx] - 1, pred, model_cfg.n_classes))
    (out / "metrics.txt").write_text(metrics.to_text())
    log.info("trained %d epochs; OA %.4f", train_cfg.epochs, metrics.oa)
    return 0


def _split_settings(meta: dict, overrides: list[str]) -> RunConfig:
    cfg = RunConfig()
    for key in ("stride", "train_fraction", "split_seed", "normalize"):
        if key in meta:
            cfg.values[key] = meta[key]
    for item in overrides:
        key, _, raw = item.partition("=")
        if _SECTION_OF.get(key.split(".")[-1]) != "data":
            raise ConfigError(f"only [data] keys may be overridden here, got {key!r}")
        cfg.set(key.strip(), raw.strip())
    return cfg


def cmd_eval(args) -> int:
    params, model_cfg, meta = load_checkpoint(args.checkpoint)
    cfg = _split_settings(meta, args.set)
    cube = load_cube(args.cube)
    if cube.labels is None:
        raise ArgumentError(f"{args.cube}: evaluation needs a labeled cube")
    ps = _prepare(cube, model_cfg.patch_size, cfg["stride"], cfg["normalize"])
    split = stratified_split(ps, cfg["train_fraction"], cfg["split_seed"])
    idx = split.test if len(split.test) else split.train
    pred = predict_labels(params, ps.patches[idx], model_cfg)
    metrics = Metrics(confusion_matrix(ps.labels[idx] - 1, pred, model_cfg.n_classes))
    _write_text(args.out, metrics.to_text())
    return 0


def cmd_predict(args) -> int:
    params, model_cfg, meta = load_checkpoint(args.checkpoint)
    cube = load_cube(args.cube)
    class_map = predict_map(params, cube, model_cfg, normalize=meta.get("normalize", True))
    write_ppm(args.out, class_map)
    return 0


def cmd_estimate(args) -> int:
    cfg = RunConfig.load(args.config, args.set)
    bands = classes = None
    cube_path = args.cube or cfg["cube"]
    if cube_path:
        cube = load_cube(cube_path)
        bands, classes = cube.bands, cube.n_classes
    report = estimate_memory(cfg.model_config(bands, classes), cfg.train_config())
    _write_text(args.out, report.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphmamba", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", help="INI-style run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="training seed")
        p.add_argument("--out", required=out_required, help="output path")
        p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")

    p = sub.add_parser("synth", help="write a synthetic labeled cube")
    p.add_argument("--height", type=int, default=24)
    p.add_argument("--width", type=int, default=24)
    p.add_argument("--bands", type=int, default=8)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_synth, parser=p)

    p = sub.add_parser("train", help="train on a labeled cube")
    p.add_argument("cube", nargs="?")
    common(p, out_required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report OA/AA/kappa of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("cube")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="render a class map as a PPM image")
    p.add_argument("checkpoint")
    p.add_argument("cube")
    common(p, out_required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("estimate", help="parameter, FLOP and memory report")
    p.add_argument("cube", nargs="?")
    common(p)
    p.set_defaults(func=cmd_estimate)
    return parser


_EXIT_CODES = [
    (ConfigError, EXIT_USAGE),
    (CubeFormatError, EXIT_FORMAT),
    (CheckpointError, EXIT_CHECKPOINT),
    (SplitError, EXIT_SPLIT),
    (NonFiniteError, EXIT_NONFINITE),
    (DimensionError, EXIT_DIMENSION),
    (ArgumentError, EXIT_DIMENSION),
    (OSError, EXIT_IO),
]


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit(getattr(args, "deterministic", False)):
            return args.func(args)
    except tuple(cls for cls, _ in _EXIT_CODES) as exc:
        code = next(c for cls, c in _EXIT_CODES if isinstance(exc, cls))
        print(f"graphmamba {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
