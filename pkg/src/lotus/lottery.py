"""Data lottery tickets: keep each image's most-attended patches.

A trained scorer runs once per image with attention capture. The CLS row of
the chosen layer(s), averaged over heads, scores every patch. The CLS->CLS
entry soaks up much of the mass (the attention sink), so it is replaced by
the mean of the patch entries before ranking. The lowest-scoring
``floor(drop_fraction * num_patches)`` patches are then dropped.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lotus.dataio import ImageDataset, decode_lottery, encode_lottery
from lotus.errors import InputError, UsageError
from lotus.training import OptimizerConfig, train_epochs
from lotus.vit import AttentionCapture, forward, iter_batches, patchify


class ScoreLayer(enum.Enum):
    LAST = "last"
    MEAN_ALL = "mean_all"


@dataclass(frozen=True)
class LotterySpec:
    drop_fraction: float = 0.10
    score_layer: ScoreLayer = ScoreLayer.LAST

    def __post_init__(self):
        _check_drop(self.drop_fraction)
        object.__setattr__(self, "score_layer", ScoreLayer(self.score_layer))


def _check_drop(x):
    if not 0.0 <= x < 1.0:
        raise InputError(f"drop_fraction must be in [0, 1), got {x}")


def num_dropped(num_patches: int, drop_fraction: float) -> int:
    return math.floor(drop_fraction * num_patches)


def sink_normalize(cls_row):
    """Replace entry 0 of a CLS attention row with the mean of entries 1..T-1.

    Accepts one row ``[T]`` or a stack ``[..., T]``. No renormalization.
    """
    row = np.array(cls_row, dtype=np.float64)
    if row.shape[-1] < 2:
        raise InputError("sink_normalize needs at least 2 entries (CLS + one patch)")
    row[..., 0] = row[..., 1:].mean(axis=-1)
    return row


def patch_scores(capture: AttentionCapture, spec: LotterySpec) -> np.ndarray:
    """Per-patch scores ``[batch, num_patches]`` from a full-sequence capture."""
    if not capture.maps:
        raise UsageError("attention capture holds no layers")
    if spec.score_layer is ScoreLayer.LAST:
        cls_rows = capture.maps[-1][:, :, 0, :]
    else:
        cls_rows = np.mean([m[:, :, 0, :] for m in capture.maps], axis=0)
    rows = cls_rows.astype(np.float64).mean(axis=1)
    return sink_normalize(rows)[:, 1:]


def select_patches(scores, drop_fraction: float) -> np.ndarray:
    """Ascending indices that survive dropping the lowest-scoring patches.

    Ties drop the lower index first. Works on one score vector or row-wise
    on a ``[batch, num_patches]`` array.
    """
    _check_drop(drop_fraction)
    s = np.asarray(scores, dtype=np.float64)
    k = num_dropped(s.shape[-1], drop_fraction)
    order = np.argsort(s, axis=-1, kind="stable")
    return np.sort(order[..., k:], axis=-1)


@dataclass
class LotteryDataset:
    labels: np.ndarray
    kept: np.ndarray
    num_patches: int
    source: ImageDataset | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        rows = [np.asarray(k, dtype=np.int64) for k in self.kept]
        if len(rows) != len(self.labels) or len({len(r) for r in rows}) > 1:
            raise UsageError("kept counts must be uniform across images")
        width = len(rows[0]) if rows else 0
        self.kept = np.stack(rows) if rows else np.zeros((0, width), dtype=np.int64)
        if self.kept.size and (self.kept.min() < 0 or self.kept.max() >= self.num_patches):
            raise UsageError(f"kept patch index outside [0, {self.num_patches})")

    def __len__(self):
        return len(self.labels)

    @property
    def num_kept(self) -> int:
        return self.kept.shape[1]

    def save(self, path) -> None:
        Path(path).write_bytes(encode_lottery(self.labels, self.kept))

    @classmethod
    def load(cls, path, num_patches: int, source: ImageDataset | None = None) -> "LotteryDataset":
        labels, kept = decode_lottery(Path(path).read_bytes(), path=path)
        return cls(labels, kept, num_patches, source)


def build_lottery_dataset(params, cfg, dataset: ImageDataset, spec: LotterySpec,
                          batch_size: int = 256) -> LotteryDataset:
    """Score every image with ``params`` and keep its top patches."""
    if len(dataset) == 0:
        raise UsageError("cannot build a lottery dataset from an empty dataset")
    patches = patchify(dataset.images, cfg.patch_size)
    kept = []
    for sl in iter_batches(len(dataset), batch_size):
        _, cap = forward(params, cfg, patches[sl], capture=True)
        kept.append(select_patches(patch_scores(cap, spec), spec.drop_fraction))
    return LotteryDataset(dataset.labels.copy(), np.concatenate(kept), cfg.num_patches, dataset)


def finetune_on_lottery(params, cfg, lottery: LotteryDataset, eval_set: ImageDataset, epochs: int,
                        opt: OptimizerConfig, seed: int, *, mask=None, experiment: str = "lottery",
                        drop_fraction: float | None = None, record_wall_time: bool = False):
    """Train on CLS + kept patches (original positions); evaluate on full images."""
    if epochs < 1:
        raise UsageError("epochs must be >= 1")
    if lottery.source is None:
        raise UsageError("lottery dataset has no source images attached")
    if drop_fraction is None:
        drop_fraction = 1.0 - lottery.num_kept / lottery.num_patches
    sparsity = None if mask is None else mask.sparsity()
    return train_epochs(params, cfg, lottery.source, eval_set, epochs, opt, seed, kept=lottery.kept,
                        mask=mask, experiment=experiment, sparsity=sparsity, drop_fraction=drop_fraction,
                        record_wall_time=record_wall_time)
