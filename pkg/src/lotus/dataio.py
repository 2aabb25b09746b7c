"""Datasets, binary file formats and metrics output.

File formats (all little-endian):

``LOTS`` checkpoint::

    b"LOTS" | u32 version=1 | u32 tensor_count
    per tensor: u16 name_len | name (utf-8) | u8 dtype (0=f32, 1=f64, 2=u8)
                | u8 ndim | ndim x u32 dims | raw data
    u32 CRC32 of every preceding byte

The config echo (including the seed) travels as a u8 tensor named
``__config__`` holding UTF-8 JSON. Masks are u8 tensors named
``<tensor>.mask``; Adam moments are ``adam.m.<tensor>`` / ``adam.v.<tensor>``
plus a one-element f64 ``adam.t``.

``LOTD`` lottery dataset::

    b"LOTD" | u32 version=1 | u32 num_images | u16 num_kept
    per image: u8 label | num_kept x u16 kept patch indices (ascending)
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lotus.errors import FormatError, InputError
from lotus.rng import make_rng

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class ImageDataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10
    blob_patch: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise InputError(f"images {self.images.shape} / labels {self.labels.shape} mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ImageDataset":
        idx = np.asarray(idx)
        blob = None if self.blob_patch is None else self.blob_patch[idx]
        return ImageDataset(self.images[idx], self.labels[idx], self.split, self.num_classes, blob)


# ---------------------------------------------------------------------------
# CIFAR-10 binary


def _decode_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) % CIFAR_RECORD:
        offset = len(raw) - len(raw) % CIFAR_RECORD
        raise FormatError(f"size {len(raw)} is not a multiple of {CIFAR_RECORD} (partial record)",
                          path=path, offset=offset)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"label byte {labels[bad[0]]} > 9", path=path, offset=int(bad[0]) * CIFAR_RECORD)
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels.astype(np.int64)


def load_cifar10(directory, limit: int | None = None, split: str = "train", dtype=np.float32) -> ImageDataset:
    """Read the CIFAR-10 binary distribution; ``limit`` keeps the first N records."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"CIFAR-10 directory not found: {directory}")
    names = CIFAR_TRAIN_FILES if split == "train" else (CIFAR_TEST_FILE,)
    files = [directory / n for n in names if (directory / n).exists()]
    if not files:
        raise FileNotFoundError(f"no {' / '.join(names)} in {directory}")
    imgs, labs, total = [], [], 0
    for f in files:
        if limit is not None and total >= limit:
            break
        im, lb = _decode_cifar_file(f)
        imgs.append(im)
        labs.append(lb)
        total += len(lb)
    images = np.concatenate(imgs)
    labels = np.concatenate(labs)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    if len(labels) == 0:
        raise InputError("CIFAR-10 selection is empty")
    return ImageDataset((images.astype(np.float64) / 255.0).astype(dtype), labels, split, 10)


# ---------------------------------------------------------------------------
# synthetic blob task


def gen_synthetic(n: int, image_size: int = 16, patch_size: int = 4, num_classes: int = 4,
                  noise_sigma: float = 0.1, seed: int = 0, channels: int = 3, split: str = "train",
                  dtype=np.float32) -> ImageDataset:
    """Noise images with one fully lit patch whose grid quadrant is the class.

    Class ``c`` (assigned round-robin) places the blob in quadrant ``c`` of the
    patch grid: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right. The
    lit patch index is kept in ``blob_patch``.
    """
    if n < 1:
        raise InputError("n must be >= 1")
    if num_classes != 4:
        raise InputError("the synthetic task has exactly 4 classes (one per quadrant)")
    grid = image_size // patch_size
    if image_size % patch_size or grid % 2:
        raise InputError("synthetic images need an even patch grid")
    rng = make_rng(seed, f"synthetic/{split}")
    labels = np.arange(n) % num_classes
    half = grid // 2
    noise = rng.normal(0.0, noise_sigma, size=(n, channels, image_size, image_size)) if noise_sigma > 0 \
        else np.zeros((n, channels, image_size, image_size))
    images = np.clip(noise, 0.0, 1.0)
    rows = rng.integers(0, half, size=n) + (labels // 2) * half
    cols = rng.integers(0, half, size=n) + (labels % 2) * half
    for i in range(n):
        r, c = rows[i] * patch_size, cols[i] * patch_size
        images[i, :, r:r + patch_size, c:c + patch_size] = 1.0
    blob = (rows * grid + cols).astype(np.int64)
    return ImageDataset(images.astype(dtype), labels, split, num_classes, blob)


# ---------------------------------------------------------------------------
# LOTS checkpoints

LOTS_MAGIC = b"LOTS"
LOTS_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
CONFIG_KEY = "__config__"


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int = 0
    version: int = LOTS_VERSION


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    echo = dict(ckpt.config)
    echo["seed"] = int(ckpt.seed)
    tensors = dict(ckpt.tensors)
    tensors[CONFIG_KEY] = np.frombuffer(json.dumps(echo, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    buf.write(LOTS_MAGIC)
    buf.write(struct.pack("<II", ckpt.version, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise InputError(f"{name}: unsupported dtype {arr.dtype}")
        shape = arr.shape if arr.ndim else (1,)
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], len(shape)))
        buf.write(struct.pack(f"<{len(shape)}I", *shape))
        buf.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(raw: bytes, path=None) -> Checkpoint:
    if len(raw) < 16:
        raise FormatError("file too short for a LOTS checkpoint", path=path, offset=len(raw))
    if raw[:4] != LOTS_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", path=path, offset=0)
    version, count = struct.unpack_from("<II", raw, 4)
    if version != LOTS_VERSION:
        raise FormatError(f"unsupported version {version}", path=path, offset=4)
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise FormatError("CRC32 mismatch", path=path, offset=len(raw) - 4)
    end = len(raw) - 4
    pos = 12
    tensors = {}

    def need(nbytes):
        if pos + nbytes > end:
            raise FormatError("truncated tensor table", path=path, offset=pos)

    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        need(nlen + 2)
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", raw, pos)
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code}", path=path, offset=pos)
        pos += 2
        need(4 * ndim)
        dims = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(nbytes)
        arr = np.frombuffer(raw, dtype=dt.newbyteorder("<"), count=nbytes // dt.itemsize, offset=pos)
        tensors[name] = arr.astype(dt).reshape(dims)
        pos += nbytes
    if pos != end:
        raise FormatError("trailing bytes after tensor table", path=path, offset=pos)
    config = {}
    if CONFIG_KEY in tensors:
        config = json.loads(tensors.pop(CONFIG_KEY).tobytes().decode("utf-8"))
    seed = int(config.pop("seed", 0))
    return Checkpoint(tensors, config, seed, version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), path=path)


def make_checkpoint(params, cfg, seed: int, mask=None, adam=None, extra_config: dict | None = None) -> Checkpoint:
    """Pack ViT params (+ optional mask / Adam state) with a config echo."""
    tensors = {name: t.data for name, t in params.items()}
    if mask is not None:
        for name, keep in mask.keep.items():
            tensors[f"{name}.mask"] = keep.astype(np.uint8)
    if adam is not None:
        for name in adam.m:
            tensors[f"adam.m.{name}"] = adam.m[name]
            tensors[f"adam.v.{name}"] = adam.v[name]
        tensors["adam.t"] = np.array([adam.t], dtype=np.float64)
    config = {"model": cfg.to_dict(), "normalization": "pixels/255"}
    if extra_config:
        config.update(extra_config)
    return Checkpoint(tensors, config, seed)


def unpack_checkpoint(ckpt: Checkpoint):
    """Inverse of :func:`make_checkpoint`: ``(params, cfg, mask or None)``."""
    from lotus.numerics import Tensor
    from lotus.pruning import Mask
    from lotus.vit import ViTConfig, check_params

    cfg = ViTConfig.from_dict(ckpt.config["model"])
    params, masks = {}, {}
    for name, arr in ckpt.tensors.items():
        if name.startswith("adam."):
            continue
        if name.endswith(".mask"):
            masks[name[:-5]] = arr.astype(np.uint8)
        else:
            params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
    check_params(params, cfg)
    return params, cfg, (Mask(masks) if masks else None)


# ---------------------------------------------------------------------------
# LOTD lottery datasets

LOTD_MAGIC = b"LOTD"
LOTD_VERSION = 1


def encode_lottery(labels, kept) -> bytes:
    kept = np.asarray(kept)
    labels = np.asarray(labels)
    n, k = kept.shape
    out = bytearray(LOTD_MAGIC)
    out += struct.pack("<IIH", LOTD_VERSION, n, k)
    rec = np.zeros(n, dtype=[("label", "u1"), ("kept", "<u2", (k,))])
    rec["label"] = labels
    rec["kept"] = kept
    out += rec.tobytes()
    return bytes(out)


def decode_lottery(raw: bytes, path=None) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) < 14:
        raise FormatError("file too short for a LOTD header", path=path, offset=len(raw))
    if raw[:4] != LOTD_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", path=path, offset=0)
    version, n, k = struct.unpack_from("<IIH", raw, 4)
    if version != LOTD_VERSION:
        raise FormatError(f"unsupported version {version}", path=path, offset=4)
    rec_size = 1 + 2 * k
    if len(raw) != 14 + n * rec_size:
        raise FormatError(f"expected {14 + n * rec_size} bytes, got {len(raw)}", path=path,
                          offset=min(len(raw), 14 + n * rec_size))
    rec = np.frombuffer(raw, dtype=[("label", "u1"), ("kept", "<u2", (k,))], count=n, offset=14)
    return rec["label"].astype(np.int64), rec["kept"].astype(np.int64).reshape(n, k)


# ---------------------------------------------------------------------------
# metrics CSV

METRIC_COLUMNS = ("experiment", "epoch", "split", "sparsity", "drop_fraction", "loss", "accuracy", "wall_ms")


@dataclass
class MetricRow:
    experiment: str
    epoch: int | None = None
    split: str = ""
    sparsity: float | None = None
    drop_fraction: float | None = None
    loss: float | None = None
    accuracy: float | None = None
    wall_ms: float | None = None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        if not math.isfinite(v):
            return str(float(v))
        return f"{float(v):.6g}"
    return str(v)


def write_metrics(path, rows) -> None:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for r in rows:
                w.writerow([_fmt(getattr(r, c)) for c in METRIC_COLUMNS])
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, obj) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
