"""Mini-batch training loop with a tab-separated epoch log."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, TextIO, Union

import numpy as np

from .model import STPAM
from .objective import Adam, LossBreakdown, loss_gradients

LOG_COLUMNS = ("epoch", "total", "Lc", "LS", "LT", "KL_S", "KL_T", "train_acc", "val_acc")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: Optional[int] = 32     # None: full batch
    lr: float = 0.003
    seed: int = 0
    max_norm: Optional[float] = None
    target_train_acc: Optional[float] = None   # stop once train accuracy reaches it
    shuffle: bool = True
    # "inference": re-predict the train set after each epoch; "running": score the
    # training-mode predictions made before each step (no extra pass)
    train_acc_mode: str = "inference"

    def __post_init__(self):
        if self.train_acc_mode not in ("inference", "running"):
            raise ValueError("train_acc_mode must be 'inference' or 'running'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    loss: LossBreakdown
    train_acc: float
    val_acc: Optional[float]

    def line(self) -> str:
        vals = [f"{v:.10g}" for v in self.loss.as_row()]
        val = "nan" if self.val_acc is None else f"{self.val_acc:.6f}"
        return "\t".join([str(self.epoch), *vals, f"{self.train_acc:.6f}", val])


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False
    seconds: float = 0.0

    @property
    def final_train_acc(self) -> float:
        return self.history[-1].train_acc if self.history else float("nan")


def accuracy(model: STPAM, X: np.ndarray, y: np.ndarray, batch_size: int = 64) -> float:
    if len(X) == 0:
        return float("nan")
    pred, _ = model.predict(X, batch_size)
    return float(np.mean(pred == np.asarray(y)))


def _mean_breakdown(parts: list[tuple[int, LossBreakdown]]) -> LossBreakdown:
    n = sum(k for k, _ in parts)
    avg = lambda attr: sum(k * getattr(b, attr) for k, b in parts) / n
    return LossBreakdown(avg("lc"), avg("ls"), avg("lt"), avg("kl_s"), avg("kl_t"),
                         parts[0][1].gamma, avg("total"))


def train(model: STPAM, X: np.ndarray, y: np.ndarray, cfg: TrainConfig = TrainConfig(),
          X_val: Optional[np.ndarray] = None, y_val: Optional[np.ndarray] = None,
          log: Union[None, str, Path, TextIO] = None, optimizer: Optional[Adam] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Fit ``model`` in place.

    Losses in the log are sample-weighted means of the per-batch values seen
    during the epoch. Validation accuracy is measured in inference mode after
    it; train accuracy follows ``cfg.train_acc_mode``. When maps use the
    predicted class, a training forward equals an inference forward, so the
    running accuracy of a full-batch epoch is exact for the pre-step model.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) != len(y) or len(X) == 0:
        raise ValueError("need a non-empty training set with one label per sample")
    opt = optimizer or Adam(lr=cfg.lr, max_norm=cfg.max_norm)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    bs = len(X) if cfg.batch_size is None else int(cfg.batch_size)
    if bs < 1:
        raise ValueError("batch size must be positive")

    own_log = isinstance(log, (str, Path))
    fh = open(log, "w") if own_log else log
    result = TrainResult()
    start = time.perf_counter()
    try:
        if fh is not None:
            fh.write("\t".join(LOG_COLUMNS) + "\n")
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(X)) if cfg.shuffle else np.arange(len(X))
            parts, hits = [], 0
            for lo in range(0, len(X), bs):
                idx = order[lo:lo + bs]
                trace = model.forward(X[idx], labels=y[idx], training=True)
                hits += int(np.sum(trace.predictions == y[idx]))
                breakdown, grads = loss_gradients(model, trace, y[idx])
                opt.step(params, grads)
                parts.append((len(idx), breakdown))
            if cfg.train_acc_mode == "running":
                train_acc = hits / len(X)
            else:
                train_acc = accuracy(model, X, y)
            val_acc = accuracy(model, X_val, y_val) if X_val is not None and len(X_val) else None
            rec = EpochRecord(epoch, _mean_breakdown(parts), train_acc, val_acc)
            result.history.append(rec)
            if fh is not None:
                fh.write(rec.line() + "\n")
                fh.flush()
            if on_epoch is not None:
                on_epoch(rec)
            if cfg.target_train_acc is not None and train_acc >= cfg.target_train_acc:
                result.stopped_early = epoch < cfg.epochs
                break
    finally:
        if own_log:
            fh.close()
    result.seconds = time.perf_counter() - start
    return result
