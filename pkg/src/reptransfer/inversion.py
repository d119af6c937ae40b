"""Feature inversion: synthesise an image whose network features match a reference.

Content is matched with a plain L2 loss on tap features, style with an L2
loss on their Gram matrices.  Only the pixels are optimised.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import DivergenceError, InputError
from .network import Checkpoint, forward_with_taps, tap_depth
from .tensor import Tape, Tensor, backward, record, scale, stack_sum, sub, sum_squares


def _feature_matrix(f: np.ndarray) -> np.ndarray:
    if f.ndim == 4:
        if f.shape[0] != 1:
            raise InputError(f"gram takes a single feature map, got batch of {f.shape[0]}")
        f = f[0]
    if f.ndim != 3:
        raise InputError(f"gram expects (C,H,W) or (1,C,H,W), got {f.shape}")
    return f.reshape(f.shape[0], -1)


def gram(features: Tensor) -> Tensor:
    """G[i, j] = sum over positions of F[i, p] * F[j, p]."""
    m = _feature_matrix(features.data)
    shape = features.shape

    def backward_fn(g: np.ndarray):
        return (((g + g.T) @ m).reshape(shape),)

    return record((features,), m @ m.T, backward_fn)


def content_loss(target: Tensor, current: Tensor) -> Tensor:
    """0.5 * ||target - current||^2, gradient w.r.t. ``current`` only."""
    if target.shape != current.shape:
        raise InputError(f"content_loss shape mismatch {target.shape} vs {current.shape}")
    return scale(sum_squares(sub(current, target.detach())), 0.5)


def style_loss(target: Tensor, current: Tensor) -> Tensor:
    """||G(target) - G(current)||^2 / (4 C^2 (HW)^2)."""
    if target.shape != current.shape:
        raise InputError(f"style_loss shape mismatch {target.shape} vs {current.shape}")
    c, hw = _feature_matrix(current.data).shape
    g_target = gram(target.detach())
    return scale(sum_squares(sub(gram(current), g_target)), 1.0 / (4.0 * c * c * hw * hw))


@dataclass
class InversionConfig:
    content: dict[str, float] = field(default_factory=lambda: {"pool_5": 1.0})
    style: dict[str, float] = field(default_factory=lambda: {"pool_1": 1.0, "pool_2": 1.0, "pool_3": 1.0})
    iterations: int = 2000
    step_size: float = 0.1
    clamp: tuple[float, float] = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if not self.content and not self.style:
            raise InputError("inversion needs at least one content or style tap")
        if self.iterations < 1:
            raise InputError(f"iterations must be >= 1, got {self.iterations}")
        for tap in list(self.content) + list(self.style):
            tap_depth(tap)

    @property
    def deepest(self) -> str:
        return max(list(self.content) + list(self.style), key=tap_depth)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["style_normalisation"] = "1/(4 C^2 (HW)^2)"
        return d


@dataclass
class InversionResult:
    image: np.ndarray                       # (3, H, W)
    history: list[tuple[int, float]]        # (iteration, total loss before the step)


def _frozen_view(net: Checkpoint) -> Checkpoint:
    return Checkpoint(net.config, {k: v.detach() for k, v in net.params.items()}, net.meta)


def inversion_loss(net: Checkpoint, image: Tensor, targets: dict[str, Tensor], cfg: InversionConfig) -> Tensor:
    _, taps = forward_with_taps(net, image, upto=cfg.deepest)
    terms = [scale(content_loss(targets[t], taps[t]), w) for t, w in cfg.content.items()]
    terms += [scale(style_loss(targets[t], taps[t]), w) for t, w in cfg.style.items()]
    return stack_sum(terms)


def invert(net: Checkpoint, reference: np.ndarray, cfg: InversionConfig,
           init: np.ndarray | None = None) -> InversionResult:
    """Gradient descent on pixels from uniform noise in [0.4, 0.6], clamped each step."""
    reference = np.asarray(reference)
    if reference.ndim != 3 or reference.shape[0] != net.config.in_channels:
        raise InputError(f"reference must be ({net.config.in_channels}, H, W), got {reference.shape}")
    frozen = _frozen_view(net)
    ref = Tensor(reference[None])
    _, ref_taps = forward_with_taps(frozen, ref, upto=cfg.deepest)
    targets = {t: ref_taps[t] for t in set(cfg.content) | set(cfg.style)}
    lo, hi = cfg.clamp
    if init is None:
        rng = np.random.default_rng(cfg.seed)
        x = rng.uniform(0.4, 0.6, reference.shape)
    else:
        x = np.array(init, copy=True)
        if x.shape != reference.shape:
            raise InputError(f"init shape {x.shape} != reference shape {reference.shape}")
    image = Tensor(x[None], requires_grad=True)
    step = image.dtype.type(cfg.step_size)
    history = []
    for it in range(cfg.iterations):
        tape = Tape()
        with tape:
            loss = inversion_loss(frozen, image, targets, cfg)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"inversion loss became {value} at iteration {it}; reduce step_size")
        history.append((it, value))
        image.grad = None
        backward(loss, tape)
        image.data -= step * image.grad
        np.clip(image.data, lo, hi, out=image.data)
    return InversionResult(image.data[0].copy(), history)
