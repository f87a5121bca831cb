"""Synthetic color-biased glyph dataset and its binary file format.

Each class owns a procedural glyph and a canonical foreground color. In the
training split all but ``round(rho * n)`` samples use the canonical color;
the rest take one of the other ``K - 1`` colors uniformly. The test split
draws colors independently of the label.
"""

from __future__ import annotations

import colorsys
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import STREAM_DATA, ContractError, make_rng

STANDARD_RATIOS = (0.005, 0.01, 0.02, 0.05)
NOISE_STD = 0.05
MAGIC = b"DGWD"
VERSION = 1
HEADER_SIZE = 32
_HEADER = struct.Struct("<4sHHHHIfQB")
SPLITS = ("train", "unbiased_test")


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class BiasedDataset:
    """Images are ``(N, H, W, 3)`` float64 values that are exactly float32-representable."""

    images: np.ndarray
    labels: np.ndarray
    biases: np.ndarray
    conflicting: np.ndarray
    num_classes: int
    split_tag: str
    gen_seed: int
    ratio_rho: float
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def side(self) -> int:
        return self.images.shape[1]

    def flat(self) -> np.ndarray:
        """Model inputs, ``(N, 3*H*W)`` in channel-planar order."""
        return np.ascontiguousarray(self.images.transpose(0, 3, 1, 2)).reshape(len(self), -1)

    def summary(self) -> dict:
        n_conf = int(self.conflicting.sum())
        return {"split": self.split_tag, "n": len(self), "aligned": len(self) - n_conf,
                "conflicting": n_conf, "rho": self.ratio_rho, "seed": self.gen_seed,
                "num_classes": self.num_classes, "side": self.side,
                "standard_ratio": any(math.isclose(self.ratio_rho, r, rel_tol=1e-6) for r in STANDARD_RATIOS)}

    def __eq__(self, other) -> bool:
        if not isinstance(other, BiasedDataset):
            return NotImplemented
        return (self.num_classes == other.num_classes and self.split_tag == other.split_tag
                and self.gen_seed == other.gen_seed and self.ratio_rho == other.ratio_rho
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.biases, other.biases)
                and np.array_equal(self.conflicting, other.conflicting))


def palette(k: int) -> np.ndarray:
    """``k`` fully saturated colors at evenly spaced hues."""
    return np.array([colorsys.hsv_to_rgb(j / k, 1.0, 1.0) for j in range(k)])


def _glyph_inside(cls: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership of glyph ``cls`` in canonical coordinates ``u, v`` in [-1, 1]."""
    au, av = np.abs(u), np.abs(v)
    r = np.hypot(u, v)
    if cls == 0:  # filled square
        return (au <= 0.7) & (av <= 0.7)
    if cls == 1:  # disk
        return r <= 0.8
    if cls == 2:  # triangle pointing up
        return (v >= -0.7) & (v <= 0.9 - 2.0 * au * 0.9 / 0.8)
    if cls == 3:  # plus
        return ((au <= 0.22) & (av <= 0.9)) | ((av <= 0.22) & (au <= 0.9))
    if cls == 4:  # ring
        return (r <= 0.9) & (r >= 0.5)
    if cls == 5:  # two horizontal bars
        return (au <= 0.85) & (np.abs(av - 0.5) <= 0.2)
    if cls == 6:  # diamond
        return au + av <= 0.9
    if cls == 7:  # X
        return ((np.abs(u - v) <= 0.3) | (np.abs(u + v) <= 0.3)) & (r <= 1.1)
    if cls == 8:  # L shape
        return ((u >= -0.7) & (u <= -0.3) & (av <= 0.8)) | ((v >= 0.4) & (v <= 0.8) & (u >= -0.7) & (u <= 0.7))
    if cls == 9:  # vertical stripes
        return (av <= 0.85) & (np.abs(au - 0.55) <= 0.18)
    raise ContractError(f"no glyph for class {cls}")


def render_mask(cls: int, side: int, shift=(0.0, 0.0), scale: float = 1.0, angle: float = 0.0) -> np.ndarray:
    """Binary ``(side, side)`` mask of a jittered glyph."""
    c = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    yy, xx = np.meshgrid(c, c, indexing="ij")
    x0, y0 = xx - shift[0], yy - shift[1]
    ca, sa = math.cos(angle), math.sin(angle)
    u = (ca * x0 + sa * y0) / scale
    v = (-sa * x0 + ca * y0) / scale
    # image rows grow downward; flip so "up" glyphs point up
    return _glyph_inside(cls, u, -v).astype(np.float64)


def _jitter(rng: np.random.Generator):
    # wide enough that shape alone does not saturate a small MLP in a few epochs
    shift = tuple(rng.uniform(-0.2, 0.2, size=2))
    scale = rng.uniform(0.8, 1.05)
    angle = rng.uniform(-0.4, 0.4)
    return shift, scale, angle


def _render_split(labels, biases, side, colors, rng, noise: bool = True) -> np.ndarray:
    n = len(labels)
    out = np.empty((n, side, side, 3))
    for j in range(n):
        shift, scale, angle = _jitter(rng)
        m = render_mask(int(labels[j]), side, shift, scale, angle)
        img = m[:, :, None] * colors[biases[j]][None, None, :]
        if noise:
            img = img + rng.normal(0.0, NOISE_STD, size=img.shape)
        out[j] = np.clip(img, 0.0, 1.0)
    return out.astype(np.float32).astype(np.float64)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def generate(num_classes: int = 5, side: int = 16, n_train: int = 5000, n_test: int = 1000,
             rho: float = 0.01, seed: int = 0, noise: bool = True):
    """Build the train and unbiased-test splits.

    Returns ``(train, test)``. When ``rho > 0`` rounds to zero conflicting
    samples, one is forced and a warning is recorded on the train split.
    """
    if not 2 <= num_classes <= 10:
        raise ContractError(f"num_classes must be in [2, 10], got {num_classes}")
    if not 0.0 <= rho <= 0.5:
        raise ContractError(f"rho must be in [0, 0.5], got {rho}")
    if side < 8:
        raise ContractError(f"side must be >= 8, got {side}")
    rng = make_rng(seed, STREAM_DATA)
    colors = palette(num_classes)
    notes: list[str] = []

    n_conf = _round_half_up(rho * n_train)
    if rho > 0 and n_conf == 0 and n_train > 0:
        msg = f"rho={rho} gives 0 conflicting samples out of {n_train}; forcing 1"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
        n_conf = 1

    y_tr = rng.permutation(np.arange(n_train) % num_classes)
    conf = np.zeros(n_train, dtype=bool)
    conf[rng.choice(n_train, size=n_conf, replace=False)] = True
    offsets = rng.integers(1, num_classes, size=n_train)
    b_tr = np.where(conf, (y_tr + offsets) % num_classes, y_tr)
    x_tr = _render_split(y_tr, b_tr, side, colors, rng, noise)

    y_te = rng.permutation(np.arange(n_test) % num_classes)
    b_te = rng.integers(0, num_classes, size=n_test)
    x_te = _render_split(y_te, b_te, side, colors, rng, noise)

    rho32 = float(np.float32(rho))
    train = BiasedDataset(x_tr, y_tr.astype(np.int64), b_tr.astype(np.int64), conf,
                          num_classes, "train", int(seed), rho32, notes)
    test = BiasedDataset(x_te, y_te.astype(np.int64), b_te.astype(np.int64), b_te != y_te,
                         num_classes, "unbiased_test", int(seed), rho32)
    return train, test


# ---------------------------------------------------------------- file format


def record_size(side: int) -> int:
    return 3 * side * side * 4 + 3


def save(ds: BiasedDataset, path) -> None:
    h = w = ds.side
    n = len(ds)
    header = _HEADER.pack(MAGIC, VERSION, ds.num_classes, h, w, n, ds.ratio_rho,
                          ds.gen_seed & 0xFFFFFFFFFFFFFFFF, SPLITS.index(ds.split_tag))
    header = header.ljust(HEADER_SIZE, b"\0")
    pix = ds.images.transpose(0, 3, 1, 2).reshape(n, -1).astype("<f4")
    tail = np.stack([ds.labels, ds.biases, ds.conflicting.astype(np.int64)], axis=1).astype(np.uint8)
    rec = np.empty(n, dtype=[("pix", "<f4", (3 * h * w,)), ("tail", "u1", (3,))])
    rec["pix"] = pix
    rec["tail"] = tail
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def load(path) -> BiasedDataset:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError("truncated header", len(raw))
    magic, version, k, h, w, n, rho, seed, split = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if not 2 <= k <= 10:
        raise FormatError(f"bad class count {k}", 6)
    if h != w or h < 8:
        raise FormatError(f"bad image size {h}x{w}", 8)
    if split >= len(SPLITS):
        raise FormatError(f"bad split tag {split}", 28)
    expected = HEADER_SIZE + n * record_size(h)
    if len(raw) != expected:
        raise FormatError(f"size {len(raw)} does not match header (expected {expected})",
                          min(len(raw), expected))
    rec = np.frombuffer(raw, dtype=[("pix", "<f4", (3 * h * w,)), ("tail", "u1", (3,))],
                        count=n, offset=HEADER_SIZE)
    images = rec["pix"].astype(np.float64).reshape(n, 3, h, w).transpose(0, 2, 3, 1).copy()
    tail = rec["tail"].astype(np.int64)
    labels, biases, conf = tail[:, 0].copy(), tail[:, 1].copy(), tail[:, 2].astype(bool)
    if n and (labels.max() >= k or biases.max() >= k):
        raise FormatError("label out of range", HEADER_SIZE)
    return BiasedDataset(images, labels, biases, conf, k, SPLITS[split], int(seed), float(rho))
