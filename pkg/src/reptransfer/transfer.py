"""Supervised training, frozen-teacher feature regression, and the baseline protocol.

The student starts from the teacher's weights and is trained on target-domain
images only, so that its tap features on ``x2`` match the teacher's tap
features on the aligned source image ``x1``.  No target labels are involved.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .datagen import LabeledImages, PairedImages
from .exceptions import DivergenceError, InputError
from .layers import pixel_cross_entropy
from .metrics import ConfusionMatrix, SegScores
from .network import (TAP_NAMES, Checkpoint, forward_with_taps, param_depth,
                      tap_depth)
from .optim import SGDConfig, poly_lr, sgd_step
from .tensor import Tape, Tensor, backward, scale, stack_sum, sub, sum_squares

log = logging.getLogger(__name__)

W_INC = (0.2, 0.4, 0.6, 0.8, 0.9)
W_DEC = tuple(reversed(W_INC))

# Desk-scale defaults; the long-schedule values live in SGDConfig itself.
# Training from scratch (teacher, B1).
SUPERVISED_DEFAULTS = dict(base_lr=0.03, max_iter=3000, batch_size=8, head_lr_mult=10.0)
# Fine-tuning the teacher on labelled target data (B2): same schedule, gentler rate.
FINETUNE_DEFAULTS = dict(SUPERVISED_DEFAULTS, base_lr=0.01)
# Feature regression.  The loss is a raw sum over batch x channels x positions,
# so the step is tiny; no decay, which would pull the student off the fixed point.
TRANSFER_DEFAULTS = dict(base_lr=1e-6, max_iter=2000, batch_size=8, weight_decay=0.0)


@dataclass(frozen=True)
class FeatureSelection:
    """Ordered (tap, weight) pairs entering the regression loss."""

    entries: tuple[tuple[str, float], ...]

    def __post_init__(self):
        entries = tuple((str(t), float(w)) for t, w in self.entries)
        object.__setattr__(self, "entries", entries)
        if not entries:
            raise InputError("feature selection needs at least one tap")
        names = [t for t, _ in entries]
        if len(set(names)) != len(names):
            raise InputError(f"duplicate taps in selection: {names}")
        for tap, w in entries:
            tap_depth(tap)
            if not w > 0:
                raise InputError(f"tap weight must be > 0, got {tap}={w}")

    @classmethod
    def single(cls, tap: str, weight: float = 1.0) -> "FeatureSelection":
        return cls(((tap, weight),))

    @classmethod
    def w_inc(cls) -> "FeatureSelection":
        return cls(tuple(zip(TAP_NAMES, W_INC)))

    @classmethod
    def w_dec(cls) -> "FeatureSelection":
        return cls(tuple(zip(TAP_NAMES, W_DEC)))

    @classmethod
    def named(cls, name: str) -> "FeatureSelection":
        """'pool_k' (weight 1), 'W_inc' or 'W_dec'."""
        if name == "W_inc":
            return cls.w_inc()
        if name == "W_dec":
            return cls.w_dec()
        return cls.single(name)

    @classmethod
    def parse(cls, taps: Sequence[str], weights: Sequence[float] | None = None) -> "FeatureSelection":
        if weights is None:
            weights = [1.0] * len(taps)
        if len(weights) != len(taps):
            raise InputError(f"{len(taps)} taps but {len(weights)} weights")
        return cls(tuple(zip(taps, weights)))

    @property
    def taps(self) -> list[str]:
        return [t for t, _ in self.entries]

    @property
    def deepest(self) -> str:
        return max(self.taps, key=tap_depth)

    def to_dict(self) -> dict:
        return {"taps": self.taps, "weights": [w for _, w in self.entries]}


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (iter, lr, loss)


def _as_tensor(t) -> Tensor:
    return t if isinstance(t, Tensor) else Tensor(t)


def feature_regression_loss(teacher_taps: Mapping, student_taps: Mapping, sel: FeatureSelection) -> Tensor:
    """sum_l w_l * ||F1_l - F2_l||^2; the teacher side is a constant."""
    terms = []
    for tap, weight in sel.entries:
        if tap not in teacher_taps or tap not in student_taps:
            raise InputError(f"tap {tap} missing from feature maps")
        target = _as_tensor(teacher_taps[tap]).detach()
        current = _as_tensor(student_taps[tap])
        if target.shape != current.shape:
            raise InputError(f"tap {tap}: teacher shape {target.shape} != student shape {current.shape}")
        terms.append(scale(sum_squares(sub(current, target)), weight))
    return stack_sum(terms)


def iteration_batches(n: int, batch_size: int, n_iter: int, seed: int):
    """Indices for each iteration: shuffled epochs, batches never straddle epochs."""
    if n < 1:
        raise InputError("empty dataset")
    rng = np.random.default_rng(seed)
    bs = min(batch_size, n)
    order: np.ndarray = np.empty(0, dtype=int)
    pos = 0
    for _ in range(n_iter):
        if pos + bs > len(order):
            order = rng.permutation(n)
            pos = 0
        yield order[pos:pos + bs]
        pos += bs


def _prepare_trainable(net: Checkpoint, trainable: Callable[[str], bool]) -> list[str]:
    frozen = []
    for name, p in net.params.items():
        p.requires_grad = trainable(name)
        p.grad = None
        if not p.requires_grad:
            frozen.append(name)
    return frozen


def _check_finite(loss: float, it: int) -> None:
    if not np.isfinite(loss):
        raise DivergenceError(f"loss became {loss} at iteration {it}; lower the learning rate")


def train_supervised(net: Checkpoint, images: np.ndarray, labels: np.ndarray, cfg: SGDConfig,
                     seed: int = 0, log_every: int = 0) -> TrainResult:
    """Pixel-wise cross-entropy training of a copy of ``net``."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise InputError("empty dataset")
    if len(images) != len(labels):
        raise InputError(f"{len(images)} images but {len(labels)} label maps")
    model = net.copy()
    frozen = _prepare_trainable(model, lambda name: True)
    velocity: dict[str, np.ndarray] = {}
    history = []
    for it, idx in enumerate(iteration_batches(len(images), cfg.batch_size, cfg.max_iter, seed)):
        tape = Tape()
        with tape:
            logits, _ = forward_with_taps(model, Tensor(images[idx]))
            loss = pixel_cross_entropy(logits, labels[idx])
        backward(loss, tape)
        value = loss.item()
        _check_finite(value, it)
        lr = poly_lr(cfg, it)
        sgd_step(model.params, velocity, cfg, it, frozen=frozen)
        history.append((it, lr, value))
        if log_every and it % log_every == 0:
            log.info("supervised it=%d lr=%.3g loss=%.4f", it, lr, value)
    _release(model)
    model.meta.update({"iterations": cfg.max_iter, "seed": seed, "trained": "supervised",
                       "sgd": cfg.to_dict()})
    return TrainResult(model, history)


def _release(model: Checkpoint) -> None:
    for p in model.params.values():
        p.requires_grad = False
        p.grad = None


def teacher_features(teacher: Checkpoint, images: np.ndarray, sel: FeatureSelection,
                     chunk: int = 64) -> dict[str, np.ndarray]:
    """Selected teacher taps for every image, computed without a tape."""
    out: dict[str, list[np.ndarray]] = {t: [] for t in sel.taps}
    for start in range(0, len(images), chunk):
        _, taps = forward_with_taps(teacher, Tensor(images[start:start + chunk]), upto=sel.deepest)
        for t in sel.taps:
            out[t].append(taps[t].data)
    return {t: np.concatenate(v) for t, v in out.items()}


def train_transfer(teacher: Checkpoint, pairs: PairedImages, sel: FeatureSelection, cfg: SGDConfig,
                   seed: int = 0, log_every: int = 0, cache_teacher: bool = False) -> TrainResult:
    """Regress student taps on x2 onto frozen-teacher taps on x1.

    Only parameters up to the deepest selected tap are trainable; the rest
    keep the teacher's values.  ``pairs`` carries no labels.

    With ``cache_teacher`` the teacher taps for all of ``x1`` are computed
    once up front instead of once per batch (same values, fewer forwards).
    """
    if not isinstance(pairs, PairedImages):
        raise InputError("train_transfer takes PairedImages (x1, x2) only")
    if len(pairs.x1) == 0:
        raise InputError("empty dataset")
    if pairs.x1.shape != pairs.x2.shape:
        raise InputError(f"x1 {pairs.x1.shape} and x2 {pairs.x2.shape} are not aligned")
    limit = tap_depth(sel.deepest)
    student = teacher.copy()
    frozen = _prepare_trainable(student, lambda name: param_depth(name) <= limit)
    targets = teacher_features(teacher, pairs.x1, sel) if cache_teacher else None
    velocity: dict[str, np.ndarray] = {}
    history = []
    for it, idx in enumerate(iteration_batches(len(pairs.x2), cfg.batch_size, cfg.max_iter, seed)):
        if targets is None:
            _, teacher_taps = forward_with_taps(teacher, Tensor(pairs.x1[idx]), upto=sel.deepest)
        else:
            teacher_taps = {t: v[idx] for t, v in targets.items()}
        tape = Tape()
        with tape:
            _, taps = forward_with_taps(student, Tensor(pairs.x2[idx]), upto=sel.deepest)
            loss = feature_regression_loss(teacher_taps, taps, sel)
        backward(loss, tape)
        value = loss.item()
        _check_finite(value, it)
        lr = poly_lr(cfg, it)
        sgd_step(student.params, velocity, cfg, it, frozen=frozen)
        history.append((it, lr, value))
        if log_every and it % log_every == 0:
            log.info("transfer it=%d lr=%.3g loss=%.4f", it, lr, value)
    _release(student)
    student.meta.update({"iterations": cfg.max_iter, "seed": seed, "trained": "transfer",
                         "selection": sel.to_dict(), "sgd": cfg.to_dict()})
    return TrainResult(student, history)


def predict(net: Checkpoint, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Arg-max label maps (N, H, W)."""
    preds = []
    for start in range(0, len(images), chunk):
        logits, _ = forward_with_taps(net, Tensor(images[start:start + chunk]))
        preds.append(logits.data.argmax(axis=1).astype(np.uint8))
    return np.concatenate(preds)


def confusion(net: Checkpoint, images: np.ndarray, labels: np.ndarray) -> ConfusionMatrix:
    cm = ConfusionMatrix(net.config.n_classes)
    return cm.accumulate(predict(net, images), labels)


def evaluate(net: Checkpoint, data: LabeledImages) -> SegScores:
    return confusion(net, data.images, data.labels).scores()


@dataclass
class BaselineReport:
    teacher_d1: SegScores
    b0: SegScores
    b1: SegScores | None = None
    b2: SegScores | None = None
    checkpoints: dict[str, Checkpoint] = field(default_factory=dict)

    def rows(self) -> dict[str, SegScores]:
        rows = {"H1 on D1": self.teacher_d1, "B0": self.b0}
        if self.b1 is not None:
            rows["B1"] = self.b1
        if self.b2 is not None:
            rows["B2"] = self.b2
        return rows


def run_baselines(teacher: Checkpoint, d1_test: LabeledImages, d2_train: LabeledImages | None,
                  d2_test: LabeledImages, cfg_b1: SGDConfig | None = None, cfg_b2: SGDConfig | None = None,
                  seed: int = 0, init_seed: int = 1) -> BaselineReport:
    """B0: teacher on D2; B1: fresh supervised net on labelled D2; B2: teacher fine-tuned on D2.

    B1/B2 are skipped when their config is None.
    """
    for name, d in (("d1_test", d1_test), ("d2_test", d2_test), ("d2_train", d2_train)):
        if d is not None and getattr(d, "labels", None) is None:
            raise InputError(f"{name} has no evaluation labels")
    from .network import init_checkpoint

    report = BaselineReport(teacher_d1=evaluate(teacher, d1_test), b0=evaluate(teacher, d2_test))
    if (cfg_b1 is not None or cfg_b2 is not None) and d2_train is None:
        raise InputError("B1/B2 need a labelled D2 training split")
    if cfg_b1 is not None:
        fresh = init_checkpoint(teacher.config, seed=init_seed, dtype=teacher.params["head.bias"].dtype)
        b1 = train_supervised(fresh, d2_train.images, d2_train.labels, cfg_b1, seed=seed).checkpoint
        report.b1 = evaluate(b1, d2_test)
        report.checkpoints["B1"] = b1
    if cfg_b2 is not None:
        b2 = train_supervised(teacher, d2_train.images, d2_train.labels, cfg_b2, seed=seed).checkpoint
        report.b2 = evaluate(b2, d2_test)
        report.checkpoints["B2"] = b2
    return report
