"""Standard and PGD adversarial training, evaluation and best-model tracking."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, pgd_attack
from .data import Dataset
from .exceptions import ConfigError, DivergenceError
from .models import ParameterStore, forward_logits, predict_logits

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.05
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    mode: str = "standard"
    attack: Optional[AttackConfig] = None
    selection: str = "auto"
    eval_robust: Optional[bool] = None
    # adversarial mode only: epochs of clean training first, then epochs over which
    # the attack radius (and step) ramps linearly up to full size
    clean_epochs: float = 0.0
    warmup_epochs: float = 0.0

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig.from_dict(self.attack)
        if self.mode not in ("standard", "adversarial"):
            raise ConfigError(f"mode must be 'standard' or 'adversarial', got {self.mode!r}")
        if self.mode == "adversarial" and self.attack is None:
            raise ConfigError("adversarial training requires an attack config")
        if self.selection not in ("auto", "standard", "robust", "average"):
            raise ConfigError(f"unknown selection metric {self.selection!r}")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("lr, epochs and batch_size must be positive")
        if self.warmup_epochs < 0 or self.clean_epochs < 0:
            raise ConfigError("clean_epochs and warmup_epochs must be >= 0")

    @property
    def selection_metric(self) -> str:
        if self.selection != "auto":
            return self.selection
        return "average" if self.mode == "adversarial" else "standard"

    @property
    def robust_eval_enabled(self) -> bool:
        if self.eval_robust is not None:
            return bool(self.eval_robust) and self.attack is not None
        return self.mode == "adversarial"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"] = self.attack.to_dict() if self.attack else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EvalReport:
    """Accuracies in percent; ``robust_accuracy`` is None without an attack."""

    standard_accuracy: float
    robust_accuracy: Optional[float]
    per_class_accuracy: List[float]
    sample_count: int
    attack: Optional[dict] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: ParameterStore
    best: ParameterStore
    best_epoch: int
    history: List[dict] = field(default_factory=list)


def sgd_step(params: ParameterStore, grads: Optional[Dict[str, np.ndarray]], lr: float,
             batch_size: int) -> ParameterStore:
    """``W -= (lr / batch_size) * g`` for every trainable tensor, in place.

    ``grads`` holds loss gradients summed over the mini-batch; when omitted
    the accumulated ``.grad`` of each tensor is used.

    Raises:
        DivergenceError: a gradient contains NaN or Inf; the message names
            the offending parameter and no tensor is modified.
    """
    named = []
    for name, t in params.trainable():
        g = t.grad if grads is None else grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise DivergenceError(f"non-finite gradient for {name!r} ({bad} of {g.size} entries)")
        named.append((t, g))
    scale = lr / batch_size
    for t, g in named:
        t.data -= (scale * g).astype(t.dtype, copy=False)
    return params


def attack_at(cfg: TrainConfig, progress: float) -> Optional[AttackConfig]:
    """Training attack after ``progress`` epochs; None while still in the clean phase."""
    if progress <= cfg.clean_epochs:
        return None
    progress -= cfg.clean_epochs
    if cfg.warmup_epochs <= 0 or progress >= cfg.warmup_epochs:
        return cfg.attack
    scale = max(progress / cfg.warmup_epochs, 1e-3)
    return replace(cfg.attack, epsilon=cfg.attack.epsilon * scale, step_size=cfg.attack.step_size * scale)


def _batch_rng(seed: int, *stream) -> np.random.Generator:
    return np.random.default_rng([int(seed), *[int(s) for s in stream]])


def evaluate(params: ParameterStore, dataset: Dataset, attack: Optional[AttackConfig] = None,
             batch_size: int = 128) -> EvalReport:
    """Clean accuracy and, with ``attack``, accuracy on PGD outputs (eval mode)."""
    x, y = dataset.images.astype(params.dtype, copy=False), dataset.labels
    n = len(y)
    pred = predict_logits(params, x, batch_size).argmax(axis=1) if n else np.zeros(0, int)
    correct = pred == y
    c = params.spec.num_classes
    per_class = [float(100.0 * correct[y == k].mean()) if np.any(y == k) else float("nan")
                 for k in range(c)]
    robust = None
    if attack is not None and n:
        frozen = params.frozen()
        hits = 0
        for b, i in enumerate(range(0, n, batch_size)):
            xb, yb = x[i: i + batch_size], y[i: i + batch_size]
            x_adv, _ = pgd_attack(frozen, xb, yb, attack, rng=_batch_rng(attack.seed, 1, b))
            hits += int((predict_logits(params, x_adv, batch_size).argmax(axis=1) == yb).sum())
        robust = 100.0 * hits / n
    return EvalReport(
        standard_accuracy=float(100.0 * correct.mean()) if n else float("nan"),
        robust_accuracy=robust,
        per_class_accuracy=per_class,
        sample_count=int(n),
        attack=attack.to_dict() if attack is not None else None,
    )


def _selection_value(metric: str, std: float, robust: Optional[float]) -> float:
    if metric == "standard":
        return std
    if robust is None:
        raise ConfigError(f"selection metric {metric!r} needs robust evaluation")
    return robust if metric == "robust" else 0.5 * (std + robust)


def train(params: ParameterStore, dataset: Dataset, cfg: TrainConfig,
          eval_data: Optional[Dataset] = None,
          hooks: Sequence[Callable[..., None]] = (),
          history_path: Optional[str] = None) -> TrainResult:
    """Mini-batch SGD, optionally on freshly generated PGD examples.

    In adversarial mode every mini-batch gets a new random start and
    ``cfg.attack.iterations`` PGD steps against the current weights before
    the weight update is taken on ``x + delta``. Each hook is called as
    ``hook(epoch=, batch=, x=, delta=)`` right before the update.

    The input store is not modified. The best store is chosen on
    ``eval_data`` (or the training data) by standard accuracy in standard
    mode and by the mean of standard and robust accuracy in adversarial
    mode.

    Raises:
        DivergenceError: loss or gradients became non-finite. ``last_good``
            holds the best store seen so far.
    """
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    if tuple(dataset.image_shape) != params.spec.input_shape:
        raise ConfigError(f"dataset images {dataset.image_shape} do not match network input {params.spec.input_shape}")
    params = params.copy()
    eval_data = eval_data if eval_data is not None else dataset
    x_all = dataset.images.astype(params.dtype, copy=False)
    y_all = dataset.labels
    n = len(y_all)
    rng = np.random.default_rng(cfg.seed)
    frozen = params.frozen()
    metric = cfg.selection_metric
    eval_attack = cfg.attack if cfg.robust_eval_enabled else None
    if metric != "standard" and eval_attack is None:
        raise ConfigError(f"selection metric {metric!r} needs robust evaluation")

    history: List[dict] = []
    best, best_value, best_epoch = params.copy(), -np.inf, 0
    sink = open(history_path, "w") if history_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(n)
            total, seen = 0.0, 0
            for b, i in enumerate(range(0, n, cfg.batch_size)):
                idx = order[i: i + cfg.batch_size]
                xb, yb = x_all[idx], y_all[idx]
                delta = None
                attack = attack_at(cfg, epoch - 1 + (i + len(idx)) / n) if cfg.mode == "adversarial" else None
                if attack is not None:
                    x_adv, delta = pgd_attack(frozen, xb, yb, attack,
                                              rng=_batch_rng(cfg.attack.seed, 0, epoch, b))
                    xb = x_adv
                for hook in hooks:
                    hook(epoch=epoch, batch=b, x=xb, delta=delta)
                params.zero_grad()
                loss = T.cross_entropy(forward_logits(params, xb, "train"), yb, reduction="sum")
                value = float(loss.data)
                if not np.isfinite(value):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}", last_good=best)
                loss.backward()
                try:
                    sgd_step(params, None, cfg.lr, len(yb))
                except DivergenceError as exc:
                    raise DivergenceError(f"epoch {epoch}, batch {b}: {exc}", last_good=best) from None
                total += value
                seen += len(yb)
            report = evaluate(params, eval_data, eval_attack)
            record = {
                "epoch": epoch,
                "train_loss": total / seen,
                "std_acc": report.standard_accuracy,
                "robust_acc": report.robust_accuracy,
            }
            history.append(record)
            if sink:
                sink.write(json.dumps(record) + "\n")
                sink.flush()
            logger.info("epoch %d loss %.4f std %.2f robust %s", epoch, record["train_loss"],
                        record["std_acc"], record["robust_acc"])
            value = _selection_value(metric, report.standard_accuracy, report.robust_accuracy)
            if value > best_value:
                best, best_value, best_epoch = params.copy(), value, epoch
    finally:
        if sink:
            sink.close()
    return TrainResult(params=params, best=best, best_epoch=best_epoch, history=history)


def write_history(history: Sequence[dict], path) -> None:
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in history))


def read_history(path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
