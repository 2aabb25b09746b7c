"""scikit-learn style wrappers over the functional core.

These exist so the pieces compose with familiar tooling (``get_params``,
``clone``, ``score``); the CLI drives the functional API directly.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from lotus._validation import check_fraction, check_images, check_labels
from lotus.dataio import ImageDataset
from lotus.lottery import LotterySpec, ScoreLayer, patch_scores, select_patches
from lotus.numerics import log_softmax_np
from lotus.pruning import Scope, magnitude_mask
from lotus.training import OptimizerConfig, train_epochs
from lotus.vit import ViTConfig, copy_params, forward, init_params, iter_batches, patchify, predict_logits


class ViTClassifier(ClassifierMixin, BaseEstimator):
    """Tiny vision transformer trained with Adam on ``[N, C, H, W]`` images.

    Labels must be integers in ``[0, num_classes)``; when ``num_classes`` is
    None it is taken as ``max(y) + 1``.
    """

    def __init__(self, image_size=16, channels=3, patch_size=4, dim=32, depth=2, heads=4,
                 mlp_ratio=2.0, num_classes=None, dropout=0.0, pos_std=2.0, epochs=8, lr=1e-3,
                 batch_size=32, seed=0):
        self.image_size = image_size
        self.channels = channels
        self.patch_size = patch_size
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.num_classes = num_classes
        self.dropout = dropout
        self.pos_std = pos_std
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def _config(self, num_classes: int) -> ViTConfig:
        return ViTConfig(image_size=self.image_size, channels=self.channels, patch_size=self.patch_size,
                         dim=self.dim, depth=self.depth, heads=self.heads, mlp_ratio=self.mlp_ratio,
                         num_classes=num_classes, dropout=self.dropout, pos_std=self.pos_std)

    def fit(self, X, y, eval_set=None):
        """Train from a fresh init. ``eval_set`` is an optional ``(X, y)`` pair."""
        y_arr = np.asarray(y)
        k = self.num_classes if self.num_classes is not None else int(y_arr.max()) + 1
        cfg = self._config(k)
        images = check_images(X, cfg)
        labels = check_labels(y_arr, len(images), k)
        ev = None
        if eval_set is not None:
            ex = check_images(eval_set[0], cfg)
            ev = ImageDataset(ex, check_labels(eval_set[1], len(ex), k), "eval", k)
        opt = OptimizerConfig(lr=self.lr, batch_size=self.batch_size)
        params, rows = train_epochs(init_params(cfg, self.seed), cfg, ImageDataset(images, labels, "train", k),
                                    ev, self.epochs, opt, self.seed)
        self.config_ = cfg
        self.params_ = params
        self.history_ = rows
        self.classes_ = np.arange(k)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        images = check_images(X, self.config_)
        return predict_logits(self.params_, self.config_, patchify(images, self.patch_size))

    def predict_proba(self, X) -> np.ndarray:
        return np.exp(log_softmax_np(self.decision_function(X).astype(np.float64)))

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def attention_maps(self, X, batch_size: int = 256) -> list:
        """Per-layer ``[N, heads, T, T]`` attention probabilities."""
        check_is_fitted(self, "params_")
        patches = patchify(check_images(X, self.config_), self.patch_size)
        chunks = []
        for sl in iter_batches(len(patches), batch_size):
            _, cap = forward(self.params_, self.config_, patches[sl], capture=True)
            chunks.append(cap.maps)
        return [np.concatenate([c[i] for c in chunks]) for i in range(self.config_.depth)]


def _params_of(obj):
    if isinstance(obj, ViTClassifier):
        check_is_fitted(obj, "params_")
        return obj.params_
    return obj


class MagnitudePruner(TransformerMixin, BaseEstimator):
    """One-shot magnitude pruning of a parameter dict or fitted :class:`ViTClassifier`.

    ``fit`` builds ``mask_`` from the given weights; ``transform`` returns a
    pruned copy of any compatible parameter dict.
    """

    def __init__(self, sparsity=0.3, scope="global"):
        self.sparsity = sparsity
        self.scope = scope

    def fit(self, X, y=None):
        check_fraction(self.sparsity, "sparsity")
        self.mask_ = magnitude_mask(_params_of(X), self.sparsity, Scope(self.scope))
        return self

    def transform(self, X):
        check_is_fitted(self, "mask_")
        return self.mask_.apply(copy_params(_params_of(X)))


class LotteryPatchSelector(TransformerMixin, BaseEstimator):
    """Pick each image's most attended patches using a fitted scorer model.

    ``transform`` returns ``[N, K]`` original patch indices in ascending order.
    """

    def __init__(self, scorer=None, drop_fraction=0.10, score_layer="last", batch_size=256):
        self.scorer = scorer
        self.drop_fraction = drop_fraction
        self.score_layer = score_layer
        self.batch_size = batch_size

    def fit(self, X=None, y=None):
        if not isinstance(self.scorer, ViTClassifier):
            raise TypeError("scorer must be a ViTClassifier")
        check_is_fitted(self.scorer, "params_")
        self.spec_ = LotterySpec(check_fraction(self.drop_fraction, "drop_fraction"), ScoreLayer(self.score_layer))
        return self

    def scores(self, X) -> np.ndarray:
        check_is_fitted(self, "spec_")
        cfg = self.scorer.config_
        patches = patchify(check_images(X, cfg), cfg.patch_size)
        out = []
        for sl in iter_batches(len(patches), self.batch_size):
            _, cap = forward(self.scorer.params_, cfg, patches[sl], capture=True)
            out.append(patch_scores(cap, self.spec_))
        return np.concatenate(out)

    def transform(self, X) -> np.ndarray:
        return select_patches(self.scores(X), self.spec_.drop_fraction)
