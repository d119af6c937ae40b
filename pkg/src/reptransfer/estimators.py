"""scikit-learn style wrappers around the training and inversion routines.

    >>> teacher = SegmentationNet(max_iter=3000).fit(X1, y1)
    >>> student = FeatureRegressionTransfer(teacher.checkpoint_, taps=("pool_5",)).fit(X2, X1)
    >>> student.score(X2_test, y2_test)        # mIoU in percent

Hyper-parameters are constructor arguments (so ``get_params``/``set_params``
and ``sklearn.base.clone`` work); fitted state ends in an underscore.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .datagen import PairedImages
from .inversion import InversionConfig, invert
from .metrics import ConfusionMatrix
from .network import Checkpoint, NetworkConfig, forward_with_taps, init_checkpoint
from .optim import DEFAULT_WEIGHT_DECAY, SGDConfig
from .tensor import Tensor, default_dtype
from .transfer import (FeatureSelection, predict, train_supervised,
                       train_transfer)
from .validation import check_images, check_label_maps, check_paired


class _SegmenterMixin:
    """predict / score / feature extraction for estimators exposing ``checkpoint_``."""

    def _net(self) -> Checkpoint:
        check_is_fitted(self, "checkpoint_")
        return self.checkpoint_

    def predict(self, X) -> np.ndarray:
        return predict(self._net(), check_images(X, dtype=default_dtype()))

    def confusion_matrix(self, X, y) -> ConfusionMatrix:
        X = check_images(X, dtype=default_dtype())
        net = self._net()
        y = check_label_maps(y, net.config.n_classes, (X.shape[0],) + X.shape[2:])
        return ConfusionMatrix(net.config.n_classes).accumulate(predict(net, X), y)

    def score(self, X, y) -> float:
        """mIoU (percent) over classes present in ``y``."""
        return self.confusion_matrix(X, y).scores().miou

    def feature_maps(self, X, tap: str = "pool_5") -> np.ndarray:
        _, taps = forward_with_taps(self._net(), Tensor(check_images(X, dtype=default_dtype())), upto=tap)
        return taps[tap].data


class SegmentationNet(_SegmenterMixin, BaseEstimator):
    """Mini-VGG segmenter trained with pixel-wise cross-entropy.

    ``init_checkpoint`` warm-starts from existing weights (fine-tuning, the B2
    baseline); otherwise weights are drawn from ``random_state``.
    """

    def __init__(self, n_classes=5, widths=(16, 32, 48, 64, 64), base_lr=0.03, momentum=0.9,
                 weight_decay=DEFAULT_WEIGHT_DECAY, power=0.9, max_iter=3000, batch_size=8,
                 head_lr_mult=10.0, init_checkpoint=None, random_state=0):
        self.n_classes = n_classes
        self.widths = widths
        self.base_lr = base_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.power = power
        self.max_iter = max_iter
        self.batch_size = batch_size
        self.head_lr_mult = head_lr_mult
        self.init_checkpoint = init_checkpoint
        self.random_state = random_state

    def _sgd(self) -> SGDConfig:
        return SGDConfig(base_lr=self.base_lr, momentum=self.momentum, weight_decay=self.weight_decay,
                         power=self.power, max_iter=self.max_iter, batch_size=self.batch_size,
                         head_lr_mult=self.head_lr_mult)

    def fit(self, X, y):
        X = check_images(X, dtype=default_dtype())
        y = check_label_maps(y, self.n_classes, (X.shape[0],) + X.shape[2:])
        if self.init_checkpoint is not None:
            start = self.init_checkpoint
        else:
            cfg = NetworkConfig(n_classes=self.n_classes, widths=tuple(self.widths))
            start = init_checkpoint(cfg, seed=self.random_state)
        result = train_supervised(start, X, y, self._sgd(), seed=self.random_state)
        self.checkpoint_ = result.checkpoint
        self.loss_history_ = result.history
        return self


class FeatureRegressionTransfer(_SegmenterMixin, BaseEstimator):
    """Annotation-free adaptation of a frozen teacher to a new image domain.

    ``fit(X, X_source)`` takes target-domain images ``X`` and their
    content-aligned source-domain counterparts; no labels.  The fitted
    student reuses the teacher's head, so ``predict`` yields label maps.
    """

    def __init__(self, teacher=None, taps=("pool_5",), weights=None, base_lr=1e-6, momentum=0.9,
                 weight_decay=0.0, power=0.9, max_iter=2000, batch_size=8, cache_teacher=False,
                 random_state=0):
        self.teacher = teacher
        self.taps = taps
        self.weights = weights
        self.base_lr = base_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.power = power
        self.max_iter = max_iter
        self.batch_size = batch_size
        self.cache_teacher = cache_teacher
        self.random_state = random_state

    def selection(self) -> FeatureSelection:
        if isinstance(self.taps, str) and self.taps in ("W_inc", "W_dec"):
            return FeatureSelection.named(self.taps)
        taps = [self.taps] if isinstance(self.taps, str) else list(self.taps)
        return FeatureSelection.parse(taps, self.weights)

    def fit(self, X, X_source):
        if self.teacher is None:
            raise ValueError("FeatureRegressionTransfer needs a teacher checkpoint")
        X, X_source = check_paired(X, X_source)
        dtype = default_dtype()
        cfg = SGDConfig(base_lr=self.base_lr, momentum=self.momentum, weight_decay=self.weight_decay,
                        power=self.power, max_iter=self.max_iter, batch_size=self.batch_size)
        result = train_transfer(self.teacher, PairedImages(X_source.astype(dtype), X.astype(dtype)),
                                self.selection(), cfg, seed=self.random_state,
                                cache_teacher=self.cache_teacher)
        self.checkpoint_ = result.checkpoint
        self.loss_history_ = result.history
        return self


class FeatureInverter(TransformerMixin, BaseEstimator):
    """Maps reference images to images synthesised from the network's features."""

    def __init__(self, network=None, content=None, style=None, n_iter=2000, step_size=0.1, random_state=0):
        self.network = network
        self.content = content
        self.style = style
        self.n_iter = n_iter
        self.step_size = step_size
        self.random_state = random_state

    def _config(self) -> InversionConfig:
        kwargs = dict(iterations=self.n_iter, step_size=self.step_size, seed=self.random_state)
        if self.content is not None:
            kwargs["content"] = dict(self.content)
        if self.style is not None:
            kwargs["style"] = dict(self.style)
        return InversionConfig(**kwargs)

    def fit(self, X=None, y=None):
        if self.network is None:
            raise ValueError("FeatureInverter needs a network checkpoint")
        self.config_ = self._config()
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "config_")
        X = check_images(X, dtype=default_dtype())
        results = [invert(self.network, x, self.config_) for x in X]
        self.loss_histories_ = [r.history for r in results]
        return np.stack([r.image for r in results])
