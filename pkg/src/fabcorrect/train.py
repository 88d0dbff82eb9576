"""Training loop shared by the segmentation, predictor, corrector and tandem tasks."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import Tensor
from .data.pipeline import SamplePair, Split, split_and_shuffle
from .errors import ContractError, InvalidShapeError, NumericError
from .losses import LOSSES, binarize, iou_per_sample
from .models import ModelGraph, compose_tandem, save_checkpoint

log = logging.getLogger(__name__)

TASKS = ("segmentation", "predictor", "corrector", "tandem")
LR_FLOOR = 1e-7
MIN_IMPROVEMENT = 1e-6


# -- optimizer ------------------------------------------------------------------
@dataclass
class AdamWState:
    """Per-parameter first/second moments and step counts."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
    frozen: Sequence[str] | Mapping[str, bool] = (),
) -> None:
    """One AdamW update in place, with decay decoupled from the gradient.

    Parameters named in ``frozen`` (or mapped to True) are left untouched
    and their moments do not advance. Arithmetic runs in float64 and the
    result is stored back in the parameter's dtype.
    """
    b1, b2 = betas
    is_frozen = (lambda n: bool(frozen.get(n, False))) if isinstance(frozen, Mapping) else set(frozen).__contains__
    for name, p in params.items():
        if is_frozen(name):
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise InvalidShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        g = g.astype(np.float64)
        m = state.m.get(name, np.zeros(p.shape))
        v = state.v.get(name, np.zeros(p.shape))
        t = state.t.get(name, 0) + 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        w = p.data.astype(np.float64)
        w = w - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * w)
        p.data[...] = w.astype(p.data.dtype)
        state.m[name], state.v[name], state.t[name] = m, v, t


# -- schedules and early stopping -----------------------------------------------
@dataclass(frozen=True)
class SchedulerConfig:
    kind: str = "plateau"  # none | plateau | step
    factor: float = 0.5
    patience: int = 2
    every: int = 10

    def __post_init__(self):
        if self.kind not in ("none", "plateau", "step"):
            raise ContractError(f"unknown scheduler {self.kind!r}")
        if not 0 < self.factor <= 1:
            raise ContractError("scheduler factor must lie in (0, 1]")
        if self.patience < 1 or self.every < 1:
            raise ContractError("scheduler patience and every must be >= 1")


@dataclass
class LRScheduler:
    """Learning-rate schedule; call :meth:`step` once per finished epoch."""

    config: SchedulerConfig
    base_lr: float
    lr: float = 0.0
    best: float = float("inf")
    bad_epochs: int = 0
    epochs_seen: int = 0

    def __post_init__(self):
        if not self.lr:
            self.lr = self.base_lr

    def step(self, val_loss: float | None = None) -> float:
        self.epochs_seen += 1
        cfg = self.config
        if cfg.kind == "plateau" and val_loss is not None:
            if val_loss < self.best - MIN_IMPROVEMENT:
                self.best = val_loss
                self.bad_epochs = 0
            else:
                self.bad_epochs += 1
                if self.bad_epochs >= cfg.patience:
                    self.lr = self.lr * cfg.factor
                    self.bad_epochs = 0
        elif cfg.kind == "step":
            self.lr = self.base_lr * cfg.factor ** (self.epochs_seen // cfg.every)
        # the floor bounds decay only; it never raises a smaller base rate
        self.lr = max(self.lr, min(LR_FLOOR, self.base_lr))
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best, "bad_epochs": self.bad_epochs, "epochs_seen": self.epochs_seen}

    def load(self, s: dict) -> None:
        self.lr, self.best = float(s["lr"]), float(s["best"])
        self.bad_epochs, self.epochs_seen = int(s["bad_epochs"]), int(s["epochs_seen"])


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    best_epoch: int  # 1-based; 0 when the history is empty


def early_stop(history: Sequence[float], patience: int) -> StopDecision:
    """Stop once each of the last ``patience`` epochs failed to beat the best before it."""
    if patience < 1:
        raise ContractError("patience must be >= 1")
    best, best_epoch, since = float("inf"), 0, 0
    for k, loss in enumerate(history, start=1):
        if loss < best - MIN_IMPROVEMENT:
            best, best_epoch, since = loss, k, 0
        else:
            since += 1
    return StopDecision(since >= patience, best_epoch)


# -- configuration --------------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    task: str = "predictor"
    epochs: int = 20
    batch_size: int = 2
    learning_rate: float = 4e-4
    weight_decay: float = 0.01
    val_fraction: float = 0.2
    early_stop_patience: int | None = 3
    scheduler: SchedulerConfig = SchedulerConfig()
    loss: str = "combined"
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    tandem_steepness: float = 10.0
    max_steps: int | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be positive")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if self.loss not in ("bce", "combined", "dice"):
            raise ContractError(f"unknown loss {self.loss!r}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ContractError("early_stop_patience must be >= 1 or None")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("scheduler"), dict):
            d["scheduler"] = SchedulerConfig(**d["scheduler"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# Desk-scale presets; batch sizes, learning rates and losses follow the
# usual settings for each task, epochs are sized for a CPU.
PRESETS = {
    "segmentation": TrainConfig(task="segmentation", epochs=20, batch_size=32, learning_rate=1e-4, loss="bce"),
    "predictor": TrainConfig(task="predictor", epochs=20, batch_size=2, learning_rate=4e-4, loss="combined"),
    "corrector": TrainConfig(task="corrector", epochs=20, batch_size=2, learning_rate=4e-4, loss="combined"),
    "tandem": TrainConfig(task="tandem", epochs=60, batch_size=2, learning_rate=4e-4, loss="combined"),
}


# -- run log ----------------------------------------------------------------------
@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_iou: float
    lr: float
    steps: int


@dataclass
class RunLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0
    wall_time_s: float = 0.0

    def train_losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    def val_losses(self) -> list[float]:
        return [e.val_loss for e in self.epochs]

    def to_dict(self) -> dict:
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "stop_reason": self.stop_reason,
            "best_epoch": self.best_epoch,
            "wall_time_s": self.wall_time_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunLog":
        return cls([EpochRecord(**e) for e in d["epochs"]], d["stop_reason"], d["best_epoch"], d["wall_time_s"])

    def write_csv(self, path: str | Path) -> None:
        cols = ["epoch", "train_loss", "val_loss", "val_iou", "lr", "steps"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols + ["best", "stop_reason"])
            for e in self.epochs:
                row = [e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.val_iou), repr(e.lr), e.steps]
                w.writerow(row + [int(e.epoch == self.best_epoch), self.stop_reason if e is self.epochs[-1] else ""])


# -- task wiring ------------------------------------------------------------------
def task_arrays(pairs: Sequence[SamplePair], task: str) -> tuple[np.ndarray, np.ndarray]:
    """Stack (inputs, targets) as float32 (N, 1, H, W) arrays for ``task``."""
    if not pairs:
        raise ContractError("empty dataset")
    if task == "segmentation":
        if any(p.sem is None for p in pairs):
            raise ContractError("segmentation needs SEM renders in every sample")
        x = [p.sem.astype(np.float32) / 255.0 for p in pairs]
        y = [p.fabricated for p in pairs]
    elif task == "predictor":
        x, y = [p.design for p in pairs], [p.fabricated for p in pairs]
    elif task == "corrector":
        x, y = [p.fabricated for p in pairs], [p.design for p in pairs]
    elif task == "tandem":
        x, y = [p.design for p in pairs], [p.design for p in pairs]
    else:
        raise ContractError(f"unknown task {task!r}")
    stack = lambda a: np.stack([np.asarray(v, dtype=np.float32) for v in a])[:, None]  # noqa: E731
    return stack(x), stack(y)


def _loss_fn(name: str) -> Callable:
    return LOSSES[name]


def evaluate(forward_np: Callable[[np.ndarray], np.ndarray], x: np.ndarray, y: np.ndarray, loss: str, batch: int = 16):
    """Mean loss (sample-weighted) and mean IoU of ``forward_np`` on (x, y)."""
    fn = _loss_fn(loss)
    total, ious = 0.0, []
    for s in range(0, len(x), batch):
        pred = forward_np(x[s : s + batch])
        total += float(fn(Tensor(pred), y[s : s + batch]).data) * len(pred)
        ious += iou_per_sample(binarize(pred), y[s : s + batch] >= 0.5)
    return total / len(x), float(np.mean(ious))


@dataclass
class Trainer:
    """Holds everything a run needs so it can be checkpointed and resumed."""

    model: ModelGraph
    config: TrainConfig
    split: Split
    predictor: ModelGraph | None = None
    optimizer: AdamWState = field(default_factory=AdamWState)
    log: RunLog = field(default_factory=RunLog)
    epoch: int = 0
    best_state: dict | None = None
    best_val: float = float("inf")

    def __post_init__(self):
        cfg = self.config
        self.scheduler = LRScheduler(cfg.scheduler, cfg.learning_rate)
        if cfg.task == "tandem":
            if self.predictor is None:
                raise ContractError("tandem training needs a trained predictor")
            self.stack = compose_tandem(self.model, self.predictor, cfg.tandem_steepness)
            self.forward = self.stack.forward
            self.forward_np = self.stack.predict
        else:
            self.forward = self.model.forward
            self.forward_np = self.model.predict
        self.x_train, self.y_train = task_arrays(self.split.train, cfg.task)
        self.x_val, self.y_val = task_arrays(self.split.val, cfg.task)
        self.model.check_input(self.x_train[:1].shape)
        self.steps = 0

    # -- one epoch --------------------------------------------------------------
    def run_epoch(self) -> EpochRecord:
        cfg = self.config
        order = self.split.epoch_order(self.epoch)
        loss_fn = _loss_fn(cfg.loss)
        lr = self.scheduler.lr
        running, seen = 0.0, 0
        for b, s in enumerate(range(0, len(order), cfg.batch_size)):
            if cfg.max_steps is not None and self.steps >= cfg.max_steps:
                break
            idx = order[s : s + cfg.batch_size]
            self.model.zero_grad()
            out = self.forward(Tensor(self.x_train[idx]))
            loss = loss_fn(out, self.y_train[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {self.epoch + 1}, batch {b + 1}, lr {lr:g}")
            loss.backward()
            grads = {n: t.grad for n, t in self.model.trainable() if t.grad is not None}
            adamw_step(
                dict(self.model.trainable()), grads, self.optimizer, lr,
                cfg.betas, cfg.eps, cfg.weight_decay,
            )
            running += value * len(idx)
            seen += len(idx)
            self.steps += 1
        train_loss = running / max(seen, 1)
        val_loss, val_iou = evaluate(self.forward_np, self.x_val, self.y_val, cfg.loss)
        self.epoch += 1
        rec = EpochRecord(self.epoch, train_loss, val_loss, val_iou, lr, self.steps)
        self.log.epochs.append(rec)
        if val_loss < self.best_val - MIN_IMPROVEMENT:
            self.best_val = val_loss
            self.best_state = self.model.state()
            self.log.best_epoch = self.epoch
        self.scheduler.step(val_loss)
        return rec

    def should_stop(self) -> str:
        cfg = self.config
        if cfg.early_stop_patience is not None:
            if early_stop(self.log.val_losses(), cfg.early_stop_patience).stop:
                return "early_stop"
        if cfg.max_steps is not None and self.steps >= cfg.max_steps:
            return "max_steps"
        if self.epoch >= cfg.epochs:
            return "epoch_budget"
        return ""

    def fit(self, checkpoint_dir: str | Path | None = None, on_epoch: Callable | None = None) -> RunLog:
        start = time.perf_counter() - self.log.wall_time_s
        reason = self.should_stop() if self.log.epochs else ""
        while not reason:
            rec = self.run_epoch()
            log.info(
                "epoch %d train %.5f val %.5f iou %.4f lr %.2e",
                rec.epoch, rec.train_loss, rec.val_loss, rec.val_iou, rec.lr,
            )
            reason = self.should_stop()
            self.log.wall_time_s = time.perf_counter() - start
            if checkpoint_dir is not None:
                self.save_state(checkpoint_dir)
            if on_epoch is not None:
                on_epoch(self, rec)
        self.log.stop_reason = reason
        if self.best_state is not None:
            self.model.load_state(self.best_state)
        self.log.wall_time_s = time.perf_counter() - start
        if checkpoint_dir is not None:
            save_checkpoint(self.model, Path(checkpoint_dir) / "best.ckpt")
        return self.log

    # -- resume -------------------------------------------------------------
    def save_state(self, directory: str | Path) -> None:
        """Write everything needed to continue this run bit-for-bit."""
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        arrays = {f"param/{n}": t.data for n, t in self.model.params.items()}
        for n in self.optimizer.m:
            arrays[f"m/{n}"] = self.optimizer.m[n]
            arrays[f"v/{n}"] = self.optimizer.v[n]
        if self.best_state is not None:
            arrays.update({f"best/{n}": a for n, a in self.best_state.items()})
        np.savez(root / "resume.npz", **arrays)
        meta = {
            "epoch": self.epoch,
            "steps": self.steps,
            "best_val": self.best_val,
            "adam_t": self.optimizer.t,
            "scheduler": self.scheduler.state(),
            "log": self.log.to_dict(),
            "config": self.config.to_dict(),
        }
        (root / "resume.json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    def load_state(self, directory: str | Path) -> None:
        root = Path(directory)
        meta = json.loads((root / "resume.json").read_text())
        if meta["config"] != self.config.to_dict():
            raise ContractError("resume state was written under a different training config")
        with np.load(root / "resume.npz") as z:
            self.model.load_state({n: z[f"param/{n}"] for n in self.model.params})
            self.optimizer = AdamWState(
                {n: z[f"m/{n}"] for n in meta["adam_t"]},
                {n: z[f"v/{n}"] for n in meta["adam_t"]},
                {n: int(t) for n, t in meta["adam_t"].items()},
            )
            best = {k[5:]: z[k] for k in z.files if k.startswith("best/")}
        self.best_state = best or None
        self.epoch, self.steps = meta["epoch"], meta["steps"]
        self.best_val = float(meta["best_val"])
        self.scheduler.load(meta["scheduler"])
        self.log = RunLog.from_dict(meta["log"])


def train(
    task: str,
    model: ModelGraph,
    dataset: Sequence[SamplePair] | Split,
    config: TrainConfig,
    predictor: ModelGraph | None = None,
    checkpoint_dir: str | Path | None = None,
    resume: bool = False,
    on_epoch: Callable | None = None,
) -> tuple[ModelGraph, RunLog]:
    """Train ``model`` on ``task``; returns the model at its best validation epoch."""
    if task != config.task:
        raise ContractError(f"task {task!r} does not match config.task {config.task!r}")
    split = dataset if isinstance(dataset, Split) else split_and_shuffle(dataset, config.val_fraction, config.seed)
    # tandem training freezes the predictor only for its own duration
    predictor_flags = dict(predictor.frozen) if predictor is not None else None
    try:
        trainer = Trainer(model, config, split, predictor)
        if resume:
            if checkpoint_dir is None or not (Path(checkpoint_dir) / "resume.json").is_file():
                raise ContractError("resume requested but no resume state found")
            trainer.load_state(checkpoint_dir)
        run_log = trainer.fit(checkpoint_dir, on_epoch)
    finally:
        if predictor_flags is not None:
            predictor.frozen.update(predictor_flags)
    return model, run_log
