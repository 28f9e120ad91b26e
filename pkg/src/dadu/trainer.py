"""ADAM training loop, validation and cross-validation for DaduModel."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Sample, kfold_split, stack_batch
from .metrics import CaseResult, SupervisionWeights, deep_supervision_loss, dice_loss, evaluate_case
from .network import DaduModel, ModelConfig, load_checkpoint, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

MILESTONES = (20, 40, 60, 80, 100)


class NumericError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]
        if not self.names:
            self.names = [f"param{i}" for i in range(len(self.params))]

    @classmethod
    def for_model(cls, model: DaduModel, lr: float = 1e-3) -> "AdamState":
        named = list(model.named_parameters())
        return cls([p for _, p in named], lr=lr, names=[n for n, _ in named])


def clip_global_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return total


def adam_step(state: AdamState) -> None:
    """One bias-corrected ADAM update of ``state.params`` from their ``.grad``.

    Parameters without a gradient are left alone. A non-finite gradient
    aborts before any parameter is touched.
    """
    for name, p in zip(state.names, state.params):
        if p.grad is not None and p.grad.shape != p.data.shape:
            raise T.ShapeError(f"gradient shape {p.grad.shape} != parameter shape {p.data.shape} for {name}")
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, m, v in zip(state.params, state.m, state.v):
        g = p.grad
        if g is None:
            continue
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# Configuration and logs
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 10
    lr: float = 1e-3
    fold: Optional[int] = None
    folds: int = 5
    eta: Optional[tuple[float, ...]] = None  # None: 0.25 per auxiliary path
    seed: int = 0
    checkpoint_every: int = 0
    clip_norm: float = 0.0  # 0 disables clipping
    eval_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def weights(self, paths: int) -> SupervisionWeights:
        if self.eta is None:
            return SupervisionWeights.uniform(paths)
        eta = tuple(self.eta)
        if len(eta) == 1 and paths != 1:
            eta = eta * paths
        return SupervisionWeights(eta)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    dsc: list[float]
    hd: list[Optional[float]]
    seconds: float

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(self.dsc)) if self.dsc else float("nan")


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def at(self, epoch: int) -> EpochRecord:
        for r in self.records:
            if r.epoch == epoch:
                return r
        raise KeyError(epoch)

    def write_csv(self, path, num_classes: int = 4) -> None:
        ks = range(1, num_classes)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"] + [f"dsc_class{k}" for k in ks] + [f"hd_class{k}" for k in ks] + ["seconds"])
            for r in self.records:
                dsc = [repr(x) for x in r.dsc] or [""] * len(ks)
                hd = ["" if x is None else repr(x) for x in r.hd] or [""] * len(ks)
                w.writerow([r.epoch, repr(r.loss)] + dsc + hd + [f"{r.seconds:.3f}"])


@dataclass
class EvalResult:
    cases: list[tuple[str, CaseResult]]
    class_dsc: list[float]
    class_hd: list[Optional[float]]
    undefined_hd: int

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(self.class_dsc))

    @property
    def mean_hd(self) -> Optional[float]:
        vals = [h for h in self.class_hd if h is not None]
        return float(np.mean(vals)) if vals else None


# ---------------------------------------------------------------------------
# Loops
# ---------------------------------------------------------------------------


def batch_loss(model: DaduModel, images: Tensor, targets: Tensor, weights: SupervisionWeights) -> Tensor:
    out = model.forward(images, training=True)
    main = dice_loss(out.main, targets)
    aux = [dice_loss(a, targets) for a in out.aux]
    return deep_supervision_loss(main, aux, weights)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_epoch(model: DaduModel, samples: Sequence[Sample], config: TrainConfig,
                adam: AdamState, epoch: int = 1) -> float:
    """One pass over ``samples`` in a seeded shuffled order; returns the mean batch loss."""
    if not samples:
        raise ValueError("cannot train on an empty fold")
    weights = config.weights(model.config.supervision_paths)
    order = epoch_order(len(samples), config.seed, epoch)
    losses = []
    for start in range(0, len(order), config.batch_size):
        batch = [samples[i] for i in order[start:start + config.batch_size]]
        images, targets = stack_batch(batch, model.config.num_classes)
        with T.Tape() as tape:
            loss = batch_loss(model, images, targets, weights)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at epoch {epoch}, batch starting {start}")
        T.backward(loss, tape)
        if config.clip_norm > 0:
            clip_global_norm(adam.params, config.clip_norm)
        adam_step(adam)
        model.zero_grad()
        losses.append(value)
    return float(np.mean(losses))


def evaluate(model, samples: Sequence[Sample], batch_size: int = 10, num_classes: int = 4,
             spacing: float = 1.0) -> EvalResult:
    """Eval-mode prediction, argmax decoding and per-case metrics with unweighted means.

    ``model`` only needs a ``predict(images) -> labels`` method. Class HD means
    skip cases where the distance is undefined (a class missing from the
    prediction); those cases still count through their DSC of 0.
    """
    cases = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        images = Tensor(np.concatenate([s.image.data for s in batch], axis=0))
        labels = model.predict(images)
        for s, pred in zip(batch, labels):
            cases.append((s.case_id, evaluate_case(pred, s.mask, num_classes, spacing)))
    ks = range(1, num_classes)
    class_dsc = [float(np.mean([c.by_class(k).dsc for _, c in cases])) for k in ks]
    class_hd = []
    undefined = 0
    for k in ks:
        vals = [c.by_class(k).hd.symmetric for _, c in cases]
        defined = [v for v in vals if v is not None]
        undefined += len(vals) - len(defined)
        class_hd.append(float(np.mean(defined)) if defined else None)
    return EvalResult(cases, class_dsc, class_hd, undefined)


@dataclass
class TrainResult:
    model: DaduModel
    log: TrainLog
    best_epoch: int
    best_dsc: float
    best_state: list[tuple[str, np.ndarray]]

    def best_model(self) -> DaduModel:
        m = DaduModel(self.model.config)
        restore_state(m, self.best_state)
        return m


def snapshot_state(model: DaduModel) -> list[tuple[str, np.ndarray]]:
    return [(k, a.copy()) for k, a in model.state_arrays()]


def restore_state(model: DaduModel, state: Sequence[tuple[str, np.ndarray]]) -> None:
    targets = dict(model.state_arrays())
    for k, a in state:
        targets[k][...] = a


def _save_optimizer(adam: AdamState, epoch: int, path: Path) -> None:
    np.savez(path, t=adam.t, epoch=epoch, **{f"m{i}": m for i, m in enumerate(adam.m)},
             **{f"v{i}": v for i, v in enumerate(adam.v)})


def _load_optimizer(adam: AdamState, path: Path) -> int:
    with np.load(path) as z:
        adam.t = int(z["t"])
        for i in range(len(adam.m)):
            adam.m[i][...] = z[f"m{i}"]
            adam.v[i][...] = z[f"v{i}"]
        return int(z["epoch"])


def train_model(train: Sequence[Sample], val: Sequence[Sample], config: TrainConfig,
                model_config: Optional[ModelConfig] = None, out_dir=None,
                resume: bool = False) -> TrainResult:
    """Train on ``train`` and validate on ``val`` after every ``eval_every`` epochs.

    The best model by validation mean foreground DSC is kept in memory and,
    with ``out_dir``, written to ``best.ckpt``. ``checkpoint_every`` > 0
    also writes ``latest.ckpt`` plus optimizer state, which ``resume`` picks up.
    """
    model = DaduModel(model_config or ModelConfig(), seed=config.seed)
    adam = AdamState.for_model(model, lr=config.lr)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    train_log = TrainLog()
    start_epoch = 1
    best_dsc, best_epoch, best_state = -1.0, 0, snapshot_state(model)
    if resume and out is not None and (out / "latest.ckpt").exists():
        restore_state(model, load_checkpoint(out / "latest.ckpt").state_arrays())
        start_epoch = _load_optimizer(adam, out / "latest_optim.npz") + 1
        if (out / "best.ckpt").exists():
            best_state = snapshot_state(load_checkpoint(out / "best.ckpt"))
        if (out / "train_log.csv").exists():
            train_log = _read_log(out / "train_log.csv")
            evaluated = [r for r in train_log.records if r.dsc]
            if evaluated:
                best = max(evaluated, key=lambda r: r.mean_dsc)
                best_dsc, best_epoch = best.mean_dsc, best.epoch
        log.info("resuming at epoch %d", start_epoch)

    k = model.config.num_classes
    for epoch in range(start_epoch, config.epochs + 1):
        t0 = time.perf_counter()
        loss = train_epoch(model, train, config, adam, epoch)
        dsc: list[float] = []
        hd: list[Optional[float]] = []
        if val and (epoch % config.eval_every == 0 or epoch == config.epochs):
            res = evaluate(model, val, config.batch_size, k)
            dsc, hd = res.class_dsc, res.class_hd
            if res.mean_dsc > best_dsc:
                best_dsc, best_epoch = res.mean_dsc, epoch
                best_state = snapshot_state(model)
                if out is not None:
                    save_checkpoint(model, out / "best.ckpt")
        rec = EpochRecord(epoch, loss, dsc, hd, time.perf_counter() - t0)
        train_log.records.append(rec)
        level = logging.INFO if epoch in MILESTONES or epoch == config.epochs else logging.DEBUG
        log.log(level, "epoch %d loss %.4f val dsc %s", epoch, loss,
                "-" if not dsc else f"{rec.mean_dsc:.4f}")
        if out is not None:
            train_log.write_csv(out / "train_log.csv", k)
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_checkpoint(model, out / "latest.ckpt")
                _save_optimizer(adam, epoch, out / "latest_optim.npz")
    if not val:
        best_epoch, best_state = config.epochs, snapshot_state(model)
        if out is not None:
            save_checkpoint(model, out / "best.ckpt")
    return TrainResult(model, train_log, best_epoch, best_dsc, best_state)


def _read_log(path) -> TrainLog:
    out = TrainLog()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            dsc_keys = sorted(k for k in row if k.startswith("dsc_class"))
            hd_keys = sorted(k for k in row if k.startswith("hd_class"))
            dsc = [float(row[k]) for k in dsc_keys if row[k] != ""]
            hd = [float(row[k]) if row[k] != "" else None for k in hd_keys] if dsc else []
            out.records.append(EpochRecord(int(row["epoch"]), float(row["loss"]), dsc, hd,
                                           float(row["seconds"])))
    return out


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


@dataclass
class FoldOutcome:
    fold: int
    train_ids: list[str]
    val_ids: list[str]
    result: TrainResult
    metrics: EvalResult


@dataclass
class CVResult:
    folds: list[FoldOutcome]

    def table(self) -> list[dict]:
        """Per-class mean and standard deviation across folds."""
        rows = []
        n_classes = len(self.folds[0].metrics.class_dsc)
        for i in range(n_classes):
            dsc = [f.metrics.class_dsc[i] for f in self.folds]
            hd = [f.metrics.class_hd[i] for f in self.folds if f.metrics.class_hd[i] is not None]
            rows.append({
                "class": i + 1,
                "dsc_mean": float(np.mean(dsc)), "dsc_std": float(np.std(dsc)),
                "hd_mean": float(np.mean(hd)) if hd else None,
                "hd_std": float(np.std(hd)) if hd else None,
            })
        return rows


def run_fold(samples: Sequence[Sample], config: TrainConfig, fold: int,
             model_config: Optional[ModelConfig] = None, out_dir=None, resume: bool = False) -> FoldOutcome:
    split = kfold_split([s.case_id for s in samples], seed=config.seed, folds=config.folds)
    by_id = {s.case_id: s for s in samples}
    train_ids, val_ids = split.train_ids(fold), split.fold(fold)
    fold_dir = Path(out_dir) / f"fold{fold}" if out_dir is not None else None
    result = train_model([by_id[c] for c in train_ids], [by_id[c] for c in val_ids], config,
                         model_config, fold_dir, resume=resume)
    metrics = evaluate(result.best_model(), [by_id[c] for c in val_ids], config.batch_size,
                       result.model.config.num_classes)
    return FoldOutcome(fold, train_ids, val_ids, result, metrics)


def run_cv(samples: Sequence[Sample], config: TrainConfig, model_config: Optional[ModelConfig] = None,
           out_dir=None, resume: bool = False) -> CVResult:
    """Train one model per fold; each fold's best checkpoint is evaluated on its held-out cases."""
    if len(samples) < config.folds:
        raise ValueError(f"{len(samples)} cases are fewer than {config.folds} folds")
    folds = [run_fold(samples, config, i, model_config, out_dir, resume) for i in range(config.folds)]
    return CVResult(folds)
