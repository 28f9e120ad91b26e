"""``dadu`` command line: synth, train, eval, predict, gradcheck.

Exit codes: 0 success, 2 missing input, 3 config error, 4 numeric failure,
5 gradcheck failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import gradcheck
from .data import DataError, load_dataset, normalize_image, phantom_dataset, write_dataset
from .metrics import write_metrics_csv
from .network import CheckpointError, ModelConfig, load_checkpoint
from .tensor import ShapeError, Tensor
from .trainer import NumericError, TrainConfig, evaluate, run_cv, run_fold, train_model

EXIT_OK = 0
EXIT_MISSING = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4
EXIT_GRADCHECK = 5

PALETTE = [0, 0, 0, 255, 0, 0, 0, 255, 0, 0, 0, 255]

log = logging.getLogger("dadu")


class ConfigError(ValueError):
    pass


class MissingInput(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    # dataset
    data: str = ""
    val_data: str = ""  # fixed split when set, cross-validation otherwise
    out: str = "runs"
    size: int = 0  # 0 keeps the stored extent
    # model
    levels: int = 4
    base_channels: int = 16
    dense_layers: int = 2
    growth_rate: int = 0
    num_classes: int = 4
    supervision_paths: int = -1
    attention: bool = True
    # training
    epochs: int = 100
    batch_size: int = 10
    lr: float = 1e-3
    folds: int = 5
    eta: str = ""  # comma-separated; empty means 0.25 per path
    seed: int = 0
    checkpoint_every: int = 1
    clip_norm: float = 0.0
    eval_every: int = 1

    def model_config(self) -> ModelConfig:
        return ModelConfig(levels=self.levels, base_channels=self.base_channels,
                           dense_layers=self.dense_layers, growth_rate=self.growth_rate,
                           num_classes=self.num_classes, supervision_paths=self.supervision_paths,
                           attention=self.attention)

    def train_config(self, fold: Optional[int] = None) -> TrainConfig:
        eta = tuple(float(v) for v in self.eta.split(",")) if self.eta.strip() else None
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, fold=fold,
                           folds=self.folds, eta=eta, seed=self.seed,
                           checkpoint_every=self.checkpoint_every, clip_norm=self.clip_norm,
                           eval_every=self.eval_every)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw.strip()


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return values


def build_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    values = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise MissingInput(f"config file not found: {p}")
        values.update(parse_config(p.read_text(), str(p)))
    for i, item in enumerate(overrides, 1):
        if "=" not in item:
            raise ConfigError(f"--set #{i}: expected key=value, got {item!r}")
        values.update(parse_config(item, f"--set #{i}"))
    try:
        cfg = RunConfig(**values)
        cfg.model_config()
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    try:
        samples = phantom_dataset(args.count, size=args.size, seed=args.seed, noise_sigma=args.noise)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} phantoms to {args.out}")
    return EXIT_OK


def _dataset(path: str, size: int):
    if not path:
        raise ConfigError("no dataset given (set 'data' in the config or pass --data)")
    p = Path(path)
    if not (p / "images").is_dir():
        raise MissingInput(f"dataset not found: {p}")
    return load_dataset(p, size=size or None)


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    for key in ("data", "val_data", "out", "epochs", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    cfg = build_config(args.config, overrides)
    samples = _dataset(cfg.data, cfg.size)
    out = Path(cfg.out)
    model_cfg = cfg.model_config()

    if cfg.val_data:
        val = _dataset(cfg.val_data, cfg.size)
        res = train_model(samples, val, cfg.train_config(), model_cfg, out, resume=args.resume)
        print(f"best epoch {res.best_epoch}\tmean DSC {res.best_dsc:.4f}\t{out / 'best.ckpt'}")
        return EXIT_OK

    if args.fold is not None:
        if not 0 <= args.fold < cfg.folds:
            raise ConfigError(f"fold {args.fold} outside 0..{cfg.folds - 1}")
        outcome = run_fold(samples, cfg.train_config(args.fold), args.fold, model_cfg, out,
                           resume=args.resume)
        print(f"fold {args.fold}\tmean DSC {outcome.metrics.mean_dsc:.4f}")
        return EXIT_OK

    result = run_cv(samples, cfg.train_config(), model_cfg, out, resume=args.resume)
    print("class\tDSC_mean\tDSC_std\tHD_mean\tHD_std")
    for row in result.table():
        print("\t".join([str(row["class"]), f"{row['dsc_mean']:.4f}", f"{row['dsc_std']:.4f}",
                         _num(row["hd_mean"]), _num(row["hd_std"])]))
    return EXIT_OK


def _num(v) -> str:
    return "" if v is None else f"{v:.4f}"


def _load_model(path: str):
    p = Path(path)
    if not p.is_file():
        raise MissingInput(f"checkpoint not found: {p}")
    return load_checkpoint(p)


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    samples = _dataset(args.data, args.size)
    res = evaluate(model, samples, args.batch_size, model.config.num_classes, args.spacing)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out, res.cases)
    print("class\tDSC\tHD")
    for k, (d, h) in enumerate(zip(res.class_dsc, res.class_hd), 1):
        print(f"{k}\t{d:.4f}\t{_num(h)}")
    print(f"mean\t{res.mean_dsc:.4f}\t{_num(res.mean_hd)}")
    return EXIT_OK


def _read_image(path: str, size: int) -> Tensor:
    p = Path(path)
    if not p.is_file():
        raise MissingInput(f"image not found: {p}")
    im = Image.open(p).convert("L")
    img = np.asarray(im, dtype=np.float32) / 255.0
    if size and img.shape != (size, size):
        img = np.asarray(Image.fromarray(img, mode="F").resize((size, size), Image.BILINEAR),
                         dtype=np.float32)
    return Tensor(normalize_image(img)[None, None])


def _gray(arr: np.ndarray) -> Image.Image:
    return Image.fromarray(np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8), mode="L")


def cmd_predict(args) -> int:
    model = _load_model(args.checkpoint)
    image = _read_image(args.image, args.size)
    res = model.forward(image, training=False)
    labels = res.main.data.argmax(axis=1)[0].astype(np.uint8)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    im = Image.fromarray(labels, mode="P")
    im.putpalette(PALETTE)
    im.save(out)
    if args.maps:
        maps_dir = Path(args.maps)
        maps_dir.mkdir(parents=True, exist_ok=True)
        for level, maps in enumerate(res.maps):
            _gray(maps.m_sp.data[0, 0]).save(maps_dir / f"level{level}_spatial.png")
            # channel map drawn as a one-row strip, one pixel per channel
            _gray(maps.m_ch.data[0, :, 0, 0][None, :]).save(maps_dir / f"level{level}_channel.png")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = list(gradcheck.CHECKS) if args.ops == "all" else [args.ops]
    unknown = [n for n in names if n not in gradcheck.CHECKS]
    if unknown:
        raise ConfigError(f"unknown op {unknown[0]!r}; choose from: all, {', '.join(gradcheck.CHECKS)}")
    failed = 0
    print("op\tstatus\tmax_rel_error\tcoords\tskipped")
    for name in names:
        r = gradcheck.run_check(name, seed=args.seed)
        failed += not r.passed
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name}\t{status}\t{r.max_rel_error:.3e}\t{r.coords}\t{r.skipped}")
        if not r.passed:
            print(f"  worst: {r.worst}")
    return EXIT_GRADCHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dadu", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one fold, all folds, or a fixed split")
    p.add_argument("--config")
    p.add_argument("--fold", type=int)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--data")
    p.add_argument("--val-data", dest="val_data")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="metrics.csv")
    p.add_argument("--size", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--spacing", type=float, default=1.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--maps")
    p.add_argument("--size", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--ops", default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(message)s")
    try:
        return args.func(args)
    except (MissingInput, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, ShapeError, CheckpointError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
