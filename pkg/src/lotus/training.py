"""Mini-batch Adam training shared by baseline, lottery and ISP runs."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from lotus import numerics as nx
from lotus.dataio import MetricRow
from lotus.errors import NumericError, UsageError
from lotus.rng import make_rng
from lotus.vit import evaluate_full, forward, iter_batches, patchify

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32

    def state(self) -> nx.AdamState:
        return nx.AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def to_dict(self):
        return asdict(self)


def gather_patches(patches: np.ndarray, kept: np.ndarray) -> np.ndarray:
    """``patches[i, kept[i]]`` for every image."""
    return np.take_along_axis(patches, kept[:, :, None], axis=1)


def train_step(params, cfg, patches, positions, labels, state, mask=None, rng=None):
    """One forward/backward/Adam step; returns ``(loss, n_correct)``."""
    for t in params.values():
        t.grad = None
    with nx.Tape() as tape:
        logits = forward(params, cfg, patches, positions, rng=rng)
        loss = nx.cross_entropy(logits, labels)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"non-finite training loss {value}")
    nx.backward(loss, tape)
    grads = {name: t.grad for name, t in params.items()}
    nx.adam_step(params, grads, state, None if mask is None else mask.keep)
    correct = int(np.sum(np.argmax(logits.data, axis=1) == labels))
    return value, correct


def train_epochs(params, cfg, train, eval_set, epochs: int, opt: OptimizerConfig, seed: int, *,
                 kept: np.ndarray | None = None, mask=None, experiment: str = "baseline",
                 sparsity: float | None = None, drop_fraction: float | None = 0.0,
                 hflip: bool = False, record_wall_time: bool = False, on_epoch=None,
                 state: nx.AdamState | None = None):
    """Train ``params`` in place and return per-epoch metric rows.

    ``kept`` (``[N, K]`` original patch indices) restricts every training
    image to those patches; evaluation always uses full sequences and is
    skipped when ``eval_set`` is None. With a
    ``mask`` the pruned weights are pinned to zero before the first step and
    after every update. ``on_epoch(epoch, params)`` runs after each epoch.
    """
    if epochs < 0:
        raise UsageError("epochs must be >= 0")
    if len(train) == 0:
        raise UsageError("empty training set")
    if mask is not None:
        mask.apply(params)
    state = state or opt.state()
    shuffle_rng = make_rng(seed, "shuffle")
    drop_rng = make_rng(seed, "dropout") if cfg.dropout > 0 else None
    flip_rng = make_rng(seed, "hflip")
    labels_all = np.asarray(train.labels, dtype=np.intp)
    base_patches = patchify(train.images, cfg.patch_size)
    if kept is not None:
        kept = np.asarray(kept, dtype=np.intp)
        if kept.shape[0] != len(train):
            raise UsageError("kept index table does not match the training set")
    rows = []
    n = len(train)
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        if hflip and kept is None:
            flips = flip_rng.random(n) < 0.5
            imgs = train.images.copy()
            imgs[flips] = imgs[flips][..., ::-1]
            patches_all = patchify(imgs, cfg.patch_size)
        else:
            patches_all = base_patches
        total_loss, total_correct = 0.0, 0
        for sl in iter_batches(n, opt.batch_size):
            idx = order[sl]
            if kept is None:
                x, pos = patches_all[idx], None
            else:
                pos = kept[idx]
                x = gather_patches(patches_all[idx], pos)
            loss, correct = train_step(params, cfg, x, pos, labels_all[idx], state, mask, drop_rng)
            total_loss += loss * len(idx)
            total_correct += correct
        train_ms = (time.perf_counter() - t0) * 1000.0
        wall = train_ms if record_wall_time else None
        rows.append(MetricRow(experiment, epoch, "train", sparsity, drop_fraction,
                              total_loss / n, total_correct / n, wall))
        log.info("%s epoch %d: train loss %.4f acc %.4f", experiment, epoch, total_loss / n, total_correct / n)
        if eval_set is not None:
            ev_loss, ev_acc = evaluate_full(params, cfg, eval_set)
            rows.append(MetricRow(experiment, epoch, "eval", sparsity, drop_fraction, ev_loss, ev_acc, None))
            log.info("%s epoch %d: eval loss %.4f acc %.4f", experiment, epoch, ev_loss, ev_acc)
        if on_epoch is not None:
            on_epoch(epoch, params)
    return params, rows
