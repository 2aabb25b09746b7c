"""A small pre-norm vision transformer built on :mod:`lotus.numerics`.

Parameters live in a plain ``dict[str, Tensor]``. Positional embeddings are
looked up by each patch's original grid index (CLS uses row 0, patch ``i``
uses row ``i + 1``), so a forward pass over any subset of patches sees the
same positions the full image would.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, fields
from typing import Dict

import numpy as np

from lotus import numerics as nx
from lotus.errors import DimensionError, InputError, UsageError
from lotus.numerics import Tensor
from lotus.rng import make_rng, truncated_normal

ViTParams = Dict[str, Tensor]


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    num_classes: int = 4
    dropout: float = 0.0
    ln_eps: float = 1e-5
    pos_std: float = 0.02

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise InputError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise InputError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.pos_std <= 0:
            raise InputError(f"pos_std must be positive, got {self.pos_std}")
        if not 0.0 <= self.dropout < 1.0:
            raise InputError(f"dropout must be in [0, 1), got {self.dropout}")
        for name in ("image_size", "channels", "patch_size", "dim", "depth", "heads", "num_classes"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# Wide positional init: with 0.02 the toy model averages tokens and its
# attention never localises the blob. See README "Synthetic defaults".
SYNTHETIC_CONFIG = ViTConfig(pos_std=2.0)
CIFAR_CONFIG = ViTConfig(image_size=32, patch_size=4, dim=64, depth=4, heads=4, num_classes=10)


def param_shapes(cfg: ViTConfig) -> dict:
    shapes = {
        "patch_embed.weight": (cfg.patch_dim, cfg.dim),
        "patch_embed.bias": (cfg.dim,),
        "cls_token": (cfg.dim,),
        "pos_embed": (cfg.seq_len, cfg.dim),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.gamma": (cfg.dim,),
            p + "ln1.beta": (cfg.dim,),
            p + "attn.wq": (cfg.dim, cfg.dim),
            p + "attn.wk": (cfg.dim, cfg.dim),
            p + "attn.wv": (cfg.dim, cfg.dim),
            p + "attn.wo": (cfg.dim, cfg.dim),
            p + "ln2.gamma": (cfg.dim,),
            p + "ln2.beta": (cfg.dim,),
            p + "mlp.w1": (cfg.dim, cfg.hidden),
            p + "mlp.b1": (cfg.hidden,),
            p + "mlp.w2": (cfg.hidden, cfg.dim),
            p + "mlp.b2": (cfg.dim,),
        })
    shapes.update({
        "norm.gamma": (cfg.dim,),
        "norm.beta": (cfg.dim,),
        "head.weight": (cfg.dim, cfg.num_classes),
        "head.bias": (cfg.num_classes,),
    })
    return shapes


_PRUNABLE_SUFFIXES = (".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo", ".mlp.w1", ".mlp.w2")


def is_prunable(name: str) -> bool:
    """Only transformer-block projection and MLP matrices are pruned."""
    return name.startswith("blocks.") and name.endswith(_PRUNABLE_SUFFIXES)


def prunable_names(params: ViTParams) -> list:
    return sorted(n for n in params if is_prunable(n))


def init_params(cfg: ViTConfig, seed: int, dtype=np.float32) -> ViTParams:
    rng = make_rng(seed, "init")
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            data = np.ones(shape, dtype=dtype)
        elif name.endswith((".beta", ".bias", ".b1", ".b2")):
            data = np.zeros(shape, dtype=dtype)
        else:
            std = cfg.pos_std if name == "pos_embed" else 0.02
            data = truncated_normal(rng, shape, std=std, dtype=dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def copy_params(params: ViTParams, dtype=None) -> ViTParams:
    out = {}
    for name, t in params.items():
        data = t.data.astype(dtype) if dtype is not None else t.data.copy()
        out[name] = Tensor(data, requires_grad=t.requires_grad, name=name)
    return out


def check_params(params: ViTParams, cfg: ViTConfig) -> None:
    expected = param_shapes(cfg)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise UsageError(f"parameter names do not match config (missing={missing}, extra={extra})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise DimensionError(f"{name}: shape {params[name].shape}, expected {shape}")


# ---------------------------------------------------------------------------
# patches


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Split ``[C, H, W]`` (or ``[N, C, H, W]``) into flattened patches.

    Patches run row-major over the patch grid; each patch is laid out
    channel-major, then row-major pixels.
    """
    x = np.asarray(images)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise InputError(f"expected [C,H,W] or [N,C,H,W] images, got shape {np.shape(images)}")
    n, c, h, w = x.shape
    p = patch_size
    if h % p or w % p:
        raise InputError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    out = x.reshape(n, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(n, gh * gw, c * p * p)
    return out[0] if single else out


def unpatchify(patches: np.ndarray, patch_size: int, channels: int, height: int, width: int) -> np.ndarray:
    x = np.asarray(patches)
    single = x.ndim == 2
    if single:
        x = x[None]
    p = patch_size
    gh, gw = height // p, width // p
    out = x.reshape(x.shape[0], gh, gw, channels, p, p).transpose(0, 3, 1, 4, 2, 5)
    out = out.reshape(x.shape[0], channels, height, width)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# forward


@dataclass
class AttentionCapture:
    """Post-softmax attention, ``maps[layer]`` shaped ``[batch, heads, T', T']``."""

    maps: list

    @property
    def depth(self) -> int:
        return len(self.maps)

    def map(self, layer: int, head: int, image: int = 0) -> np.ndarray:
        return self.maps[layer][image, head]


def forward(params: ViTParams, cfg: ViTConfig, patches, positions=None, capture: bool = False,
            rng: np.random.Generator | None = None):
    """Logits for a batch of (possibly reduced) patch sequences.

    ``patches`` is ``[B, N', patch_dim]``; ``positions`` holds each patch's
    original grid index, shaped ``[B, N']`` or ``[N']`` (default: all
    patches in order). CLS is prepended internally, so ``T' = N' + 1``.
    Dropout is active only when ``rng`` is given.
    """
    x_in = np.asarray(patches)
    if x_in.ndim != 3 or x_in.shape[2] != cfg.patch_dim:
        raise InputError(f"patches must be [B, N', {cfg.patch_dim}], got {x_in.shape}")
    b, n_tok, _ = x_in.shape
    if positions is None:
        positions = np.arange(n_tok)
    positions = np.asarray(positions, dtype=np.intp)
    if positions.ndim == 1:
        positions = np.broadcast_to(positions, (b, positions.shape[0]))
    if positions.shape != (b, n_tok):
        raise InputError(f"positions shape {positions.shape} does not match patches {(b, n_tok)}")
    if n_tok > cfg.num_patches:
        raise InputError(f"{n_tok} patches exceed the {cfg.num_patches} the config allows")
    if positions.size and (positions.min() < 0 or positions.max() >= cfg.num_patches):
        raise InputError("unknown positional index")

    dtype = params["pos_embed"].dtype
    p = params
    d, h, dh = cfg.dim, cfg.heads, cfg.head_dim
    drop = cfg.dropout if rng is not None else 0.0

    tok = nx.add_bias(nx.matmul(Tensor(x_in, dtype=dtype), p["patch_embed.weight"]), p["patch_embed.bias"])
    tok = nx.add(tok, nx.take(p["pos_embed"], positions + 1))
    zeros = np.zeros((b, 1), dtype=np.intp)
    cls = nx.add(nx.take(nx.reshape(p["cls_token"], (1, d)), zeros), nx.take(p["pos_embed"], zeros))
    x = nx.concat([cls, tok], axis=1)
    t_len = n_tok + 1
    x = nx.dropout(x, drop, rng)

    maps = []
    inv_sqrt = 1.0 / math.sqrt(dh)
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        y = nx.layer_norm(x, p[pre + "ln1.gamma"], p[pre + "ln1.beta"], cfg.ln_eps)

        def heads_first(t):
            return nx.transpose(nx.reshape(t, (b, t_len, h, dh)), (0, 2, 1, 3))

        q = heads_first(nx.matmul(y, p[pre + "attn.wq"]))
        k = heads_first(nx.matmul(y, p[pre + "attn.wk"]))
        v = heads_first(nx.matmul(y, p[pre + "attn.wv"]))
        scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), inv_sqrt)
        attn = nx.softmax(scores, axis=-1)
        if capture:
            maps.append(attn.data.copy())
        ctx = nx.matmul(nx.dropout(attn, drop, rng), v)
        ctx = nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (b, t_len, d))
        x = nx.add(x, nx.dropout(nx.matmul(ctx, p[pre + "attn.wo"]), drop, rng))

        y = nx.layer_norm(x, p[pre + "ln2.gamma"], p[pre + "ln2.beta"], cfg.ln_eps)
        y = nx.apply_activation(nx.Activation.GELU, nx.add_bias(nx.matmul(y, p[pre + "mlp.w1"]), p[pre + "mlp.b1"]))
        y = nx.add_bias(nx.matmul(y, p[pre + "mlp.w2"]), p[pre + "mlp.b2"])
        x = nx.add(x, nx.dropout(y, drop, rng))

    x = nx.layer_norm(x, p["norm.gamma"], p["norm.beta"], cfg.ln_eps)
    logits = nx.add_bias(nx.matmul(nx.select(x, 1, 0), p["head.weight"]), p["head.bias"])
    if capture:
        return logits, AttentionCapture(maps)
    return logits


def iter_batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(n, start + batch_size))


def predict_logits(params: ViTParams, cfg: ViTConfig, patches: np.ndarray, positions=None,
                   batch_size: int = 256) -> np.ndarray:
    out = []
    for sl in iter_batches(len(patches), batch_size):
        pos = positions if positions is None or np.ndim(positions) == 1 else positions[sl]
        out.append(forward(params, cfg, patches[sl], pos).data)
    return np.concatenate(out, axis=0)


def evaluate_full(params: ViTParams, cfg: ViTConfig, dataset, batch_size: int = 256):
    """``(mean loss, accuracy)`` on full patch sequences."""
    if len(dataset) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    logits = predict_logits(params, cfg, patchify(dataset.images, cfg.patch_size), batch_size=batch_size)
    labels = np.asarray(dataset.labels, dtype=np.intp)
    logp = nx.log_softmax_np(logits.astype(np.float64))
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    # np.argmax returns the first maximum: ties go to the lowest class id
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return loss, acc


def evaluate(params: ViTParams, cfg: ViTConfig, dataset, batch_size: int = 256) -> float:
    return evaluate_full(params, cfg, dataset, batch_size)[1]


def clone_config(cfg: ViTConfig, **changes) -> ViTConfig:
    d = copy.deepcopy(cfg.to_dict())
    d.update(changes)
    return ViTConfig(**d)
