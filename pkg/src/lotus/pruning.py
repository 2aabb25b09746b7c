"""Unstructured magnitude pruning, mask algebra and the two-round ISSP pipeline.

Round one prunes the trained model one-shot at its essential sparsity (the
largest sweep level whose accuracy stays within ``tolerance`` of baseline).
Round two briefly fine-tunes the round-one model on a small data fraction,
takes magnitude masks restricted to the round-one survivors at several
sparsity levels after every epoch, ORs them together into a denoised mask,
and trims that mask back to the target sparsity.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from lotus.errors import InputError, UsageError
from lotus.rng import make_rng
from lotus.training import OptimizerConfig, train_epochs
from lotus.vit import copy_params, evaluate, prunable_names

log = logging.getLogger(__name__)

_EPS = 1e-12


class Scope(enum.Enum):
    GLOBAL = "global"
    PER_LAYER = "per_layer"


class Mask:
    """Per-tensor keep-masks (``1`` = weight survives) over the prunable set."""

    def __init__(self, keep: dict):
        self.keep = {name: np.asarray(keep[name], dtype=np.uint8) for name in sorted(keep)}

    @classmethod
    def ones(cls, params) -> "Mask":
        return cls({n: np.ones(params[n].shape, dtype=np.uint8) for n in prunable_names(params)})

    @classmethod
    def zeros(cls, params) -> "Mask":
        return cls({n: np.zeros(params[n].shape, dtype=np.uint8) for n in prunable_names(params)})

    @property
    def names(self) -> list:
        return list(self.keep)

    @property
    def total(self) -> int:
        return int(sum(k.size for k in self.keep.values()))

    @property
    def num_pruned(self) -> int:
        return int(sum(k.size - int(k.sum()) for k in self.keep.values()))

    def sparsity(self) -> float:
        return self.num_pruned / self.total if self.total else 0.0

    def flat(self) -> np.ndarray:
        return np.concatenate([k.ravel() for k in self.keep.values()]) if self.keep else np.zeros(0, np.uint8)

    def check_covers(self, params) -> None:
        names = prunable_names(params)
        if names != self.names:
            raise UsageError(f"mask covers {self.names}, params' prunable set is {names}")
        for n in names:
            if params[n].shape != self.keep[n].shape:
                raise UsageError(f"mask for {n} has shape {self.keep[n].shape}, weight {params[n].shape}")

    def apply(self, params):
        """Zero pruned weights in place; returns ``params``."""
        self.check_covers(params)
        for name, keep in self.keep.items():
            t = params[name]
            t.data = t.data * keep.astype(t.dtype)
        return params

    def is_subset_of(self, other: "Mask") -> bool:
        """Every weight this mask keeps is also kept by ``other``."""
        _check_same_coverage([self, other])
        return all(not np.any(self.keep[n] & ~other.keep[n]) for n in self.keep)

    def copy(self) -> "Mask":
        return Mask({n: k.copy() for n, k in self.keep.items()})

    def __eq__(self, other):
        if not isinstance(other, Mask) or self.names != other.names:
            return NotImplemented if not isinstance(other, Mask) else False
        return all(np.array_equal(self.keep[n], other.keep[n]) for n in self.keep)

    def __repr__(self):
        return f"Mask({len(self.keep)} tensors, sparsity={self.sparsity():.4f})"


def _check_sparsity(s):
    if not (0.0 <= s < 1.0) or math.isnan(s):
        raise InputError(f"sparsity must be in [0, 1), got {s}")


def _check_same_coverage(masks):
    first = masks[0]
    for m in masks[1:]:
        if m.names != first.names or any(m.keep[n].shape != first.keep[n].shape for n in first.keep):
            raise UsageError("masks cover different tensors or shapes")


def _prune_smallest(flat_abs: np.ndarray, k: int, eligible: np.ndarray | None = None) -> np.ndarray:
    """Flat keep-vector with the ``k`` smallest eligible magnitudes zeroed.

    Ties resolve by flat position, which is (tensor name asc, flat index asc)
    because tensors are concatenated in name order.
    """
    keep = np.ones(flat_abs.size, dtype=np.uint8)
    if eligible is None:
        order = np.argsort(flat_abs, kind="stable")
    else:
        cand = np.flatnonzero(eligible)
        order = cand[np.argsort(flat_abs[cand], kind="stable")]
    keep[order[:k]] = 0
    return keep


def _split_flat(flat: np.ndarray, like: dict) -> dict:
    out, pos = {}, 0
    for name in sorted(like):
        shape = like[name]
        size = int(np.prod(shape))
        out[name] = flat[pos:pos + size].reshape(shape)
        pos += size
    return out


def _flat_abs(params, names) -> np.ndarray:
    return np.concatenate([np.abs(params[n].data.astype(np.float64)).ravel() for n in names])


def magnitude_mask(params, sparsity: float, scope: Scope = Scope.GLOBAL) -> Mask:
    """Prune exactly ``floor(sparsity * n)`` smallest-|w| weights."""
    _check_sparsity(sparsity)
    scope = Scope(scope)
    names = prunable_names(params)
    if scope is Scope.PER_LAYER:
        keep = {}
        for n in names:
            a = np.abs(params[n].data.astype(np.float64)).ravel()
            keep[n] = _prune_smallest(a, math.floor(sparsity * a.size)).reshape(params[n].shape)
        return Mask(keep)
    flat = _flat_abs(params, names)
    k = math.floor(sparsity * flat.size)
    return Mask(_split_flat(_prune_smallest(flat, k), {n: params[n].shape for n in names}))


def restricted_magnitude_mask(params, sparsity: float, base: Mask) -> Mask:
    """Global magnitude mask at ``sparsity`` that never revives ``base``-pruned weights.

    The result prunes everything ``base`` pruned, then the smallest surviving
    weights until ``floor(sparsity * n)`` are gone. A level at or below
    ``base``'s sparsity returns ``base`` unchanged.
    """
    _check_sparsity(sparsity)
    base.check_covers(params)
    names = base.names
    flat = _flat_abs(params, names)
    base_keep = base.flat().astype(bool)
    k_total = math.floor(sparsity * flat.size)
    extra = max(0, k_total - int((~base_keep).sum()))
    keep = _prune_smallest(flat, extra, eligible=base_keep) & base_keep
    return Mask(_split_flat(keep.astype(np.uint8), {n: params[n].shape for n in names}))


def union_masks(masks) -> Mask:
    """Keep a weight if any input mask keeps it."""
    masks = list(masks)
    if not masks:
        raise UsageError("union_masks needs at least one mask")
    _check_same_coverage(masks)
    out = {}
    for n in masks[0].names:
        acc = masks[0].keep[n].copy()
        for m in masks[1:]:
            acc |= m.keep[n]
        out[n] = acc
    return Mask(out)


def apply_mask(params, mask: Mask):
    return mask.apply(params)


# ---------------------------------------------------------------------------
# essential sparsity


@dataclass
class SweepReport:
    levels: list
    accuracies: list
    baseline_accuracy: float
    selected: float
    tolerance: float
    fallback: bool = False

    def to_dict(self):
        return {
            "levels": list(self.levels),
            "accuracies": list(self.accuracies),
            "baseline_accuracy": self.baseline_accuracy,
            "selected": self.selected,
            "tolerance": self.tolerance,
            "fallback": self.fallback,
        }


def _check_levels(levels):
    if len(levels) == 0:
        raise UsageError("sweep needs at least one sparsity level")
    for s in levels:
        if not 0.0 < s < 1.0:
            raise InputError(f"sweep levels must lie in (0, 1), got {s}")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise InputError("sweep levels must be strictly increasing")


def select_essential_sparsity(levels, accuracies, baseline_accuracy, tolerance):
    """Largest level whose accuracy drop is within ``tolerance``.

    Returns ``(level, fallback)``; when nothing qualifies the smallest level
    is returned with ``fallback=True``.
    """
    if tolerance < 0:
        raise InputError("tolerance must be >= 0")
    ok = [s for s, a in zip(levels, accuracies) if baseline_accuracy - a <= tolerance + _EPS]
    if ok:
        return max(ok), False
    return min(levels), True


def essential_sparsity_sweep(params, cfg, eval_dataset, levels, tolerance: float = 0.01,
                             scope: Scope = Scope.GLOBAL) -> SweepReport:
    """One-shot prune a fresh copy of ``params`` at each level and evaluate it."""
    levels = [float(s) for s in levels]
    _check_levels(levels)
    if tolerance < 0:
        raise InputError("tolerance must be >= 0")
    baseline = evaluate(params, cfg, eval_dataset)
    accs = []
    for s in levels:
        p = copy_params(params)
        magnitude_mask(p, s, scope).apply(p)
        accs.append(evaluate(p, cfg, eval_dataset))
        log.info("sweep sparsity %.2f: accuracy %.4f", s, accs[-1])
    selected, fallback = select_essential_sparsity(levels, accs, baseline, tolerance)
    return SweepReport(levels, accs, baseline, selected, tolerance, fallback)


# ---------------------------------------------------------------------------
# ISP denoised mask


@dataclass
class ISPConfig:
    data_fraction: float = 0.10
    snapshot_epochs: int = 3
    soup_levels: list = field(default_factory=lambda: [0.5, 0.6, 0.7])
    target_sparsity: float = 0.6

    def __post_init__(self):
        if not 0.0 < self.data_fraction <= 1.0:
            raise InputError(f"data_fraction must be in (0, 1], got {self.data_fraction}")
        if self.snapshot_epochs < 0:
            raise InputError("snapshot_epochs must be >= 0")
        if not self.soup_levels:
            raise InputError("soup_levels must not be empty")
        for s in self.soup_levels:
            if not 0.0 < s < 1.0:
                raise InputError(f"soup levels must lie in (0, 1), got {s}")
        if not 0.0 < self.target_sparsity < 1.0:
            raise InputError(f"target_sparsity must be in (0, 1), got {self.target_sparsity}")

    def to_dict(self):
        return {"data_fraction": self.data_fraction, "snapshot_epochs": self.snapshot_epochs,
                "soup_levels": list(self.soup_levels), "target_sparsity": self.target_sparsity}


def isp_subset(train, fraction: float, seed: int):
    """Seeded ``fraction`` of ``train`` (at least one example)."""
    n = len(train)
    k = max(1, math.floor(fraction * n))
    idx = np.sort(make_rng(seed, "isp-subset").permutation(n)[:k])
    return train.subset(idx)


def denoise_masks(snapshot_masks, final_params, base: Mask, target_sparsity: float) -> Mask:
    """Union the snapshot masks, then re-prune down to ``target_sparsity``.

    Re-pruning uses |w| of ``final_params`` among weights the union kept.
    """
    merged = union_masks(snapshot_masks)
    if not merged.is_subset_of(base):
        raise UsageError("snapshot masks revive weights the base mask pruned")
    k = math.floor(target_sparsity * merged.total)
    if merged.num_pruned < k:
        merged = restricted_magnitude_mask(final_params, target_sparsity, merged)
    return merged


def isp_denoised_mask(params, cfg, train_subset, base_mask: Mask, isp_cfg: ISPConfig,
                      opt: OptimizerConfig | None = None, seed: int = 0, eval_set=None) -> Mask:
    """Denoised round-two mask; never keeps a weight ``base_mask`` pruned.

    ``params`` is not modified: the snapshot fine-tuning runs on a copy.
    With ``snapshot_epochs == 0`` the current weights form the only snapshot.
    """
    if len(train_subset) == 0:
        raise UsageError("ISP needs a non-empty training subset")
    # compared as counts so a target equal to the round-1 level is accepted
    if math.floor(isp_cfg.target_sparsity * base_mask.total) < base_mask.num_pruned:
        raise UsageError(f"target_sparsity {isp_cfg.target_sparsity} is below the base mask's "
                         f"sparsity {base_mask.sparsity():.4f}")
    opt = opt or OptimizerConfig()
    work = copy_params(params)
    base_mask.apply(work)
    snapshots = []

    def snap(epoch, p):
        for level in isp_cfg.soup_levels:
            snapshots.append(restricted_magnitude_mask(p, level, base_mask))

    if isp_cfg.snapshot_epochs == 0:
        snap(0, work)
    else:
        train_epochs(work, cfg, train_subset, eval_set,
                     isp_cfg.snapshot_epochs, opt, seed, mask=base_mask, experiment="isp",
                     on_epoch=snap)
    return denoise_masks(snapshots, work, base_mask, isp_cfg.target_sparsity)


@dataclass
class ISSPReport:
    sweep: SweepReport
    essential_sparsity: float
    sparsity_round1: float
    sparsity_round2: float
    accuracy_round1: float
    accuracy_round2: float
    soup: str = "union over training snapshots x soup levels, restricted to round-1 survivors"

    def to_dict(self):
        return {
            "sweep": self.sweep.to_dict(),
            "essential_sparsity": self.essential_sparsity,
            "sparsity_round1": self.sparsity_round1,
            "sparsity_round2": self.sparsity_round2,
            "accuracy_round1": self.accuracy_round1,
            "accuracy_round2": self.accuracy_round2,
            "soup": self.soup,
        }


def issp_pipeline(params, cfg, train, eval_set, sweep_levels, tolerance: float, isp_cfg: ISPConfig,
                  opt: OptimizerConfig | None = None, seed: int = 0, scope: Scope = Scope.GLOBAL):
    """Essential-sparsity one-shot prune followed by an ISP round.

    Returns ``(pruned params, final mask, ISSPReport)``; ``params`` itself is
    left untouched. The round-two mask is applied to the round-one weights.
    """
    sweep = essential_sparsity_sweep(params, cfg, eval_set, sweep_levels, tolerance, scope)
    s_star = sweep.selected
    pruned = copy_params(params)
    mask1 = magnitude_mask(pruned, s_star, scope)
    mask1.apply(pruned)
    acc1 = evaluate(pruned, cfg, eval_set)

    subset = isp_subset(train, isp_cfg.data_fraction, seed)
    mask2 = isp_denoised_mask(pruned, cfg, subset, mask1, isp_cfg, opt, seed)
    mask2.apply(pruned)
    acc2 = evaluate(pruned, cfg, eval_set)
    report = ISSPReport(sweep, s_star, mask1.sparsity(), mask2.sparsity(), acc1, acc2)
    log.info("ISSP: s*=%.2f round1 sparsity %.4f acc %.4f | round2 sparsity %.4f acc %.4f",
             s_star, report.sparsity_round1, acc1, report.sparsity_round2, acc2)
    return pruned, mask2, report
