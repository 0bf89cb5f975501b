"""Class-invariant input transformations and uncertainty-set construction.

Two strengths. Weak: flip-and-crop for images, light Gaussian jitter for
vectors. Strong: two atomic ops drawn uniformly from a pool, each with a
uniform random magnitude, applied in sequence (RandAugment-style).

Determinism contract: every transform is a pure function of its input and
an integer stream key (see seeding.DrawStream; draws are random-access by
counter, so goldens can be re-derived by hand). Uncertainty-set variant j
is keyed by (base seed, sample id, epoch, j) and never by K, so variant 0
of a K-variant set is bit-identical to the single variant a K=1 run would
produce.

Draw layout, frozen for reproducibility:
  weak image   counter 0: flip coin, 1: row offset, 2: column offset
  weak vector  counters 0..: Gaussian noise (Box-Muller pairs)
  strong       op slot t uses counter 2t for the pool index and 2t+1 for
               the magnitude; op-internal draws use subkey(1000 + t)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import seeding
from .errors import ConfigError

N_STRONG_OPS = 2
WEAK_CROP_PAD = 4
WEAK_VECTOR_SIGMA = 0.05


# ---------------------------------------------------------------------------
# geometry helpers (bilinear sampling, zero fill outside the frame)

def _warp_affine(img, fwd, shift):
    """Apply x_dst = fwd @ x_src + shift about the image center.

    img is (C, H, W); sampling is bilinear with zero fill.
    """
    c, h, w = img.shape
    inv = np.linalg.inv(fwd)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy = ys - cy - shift[0]
    dx = xs - cx - shift[1]
    sy = inv[0, 0] * dy + inv[0, 1] * dx + cy
    sx = inv[1, 0] * dy + inv[1, 1] * dx + cx
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    wy = sy - y0
    wx = sx - x0
    out = np.zeros_like(img)
    for oy, ox, weight in (
        (0, 0, (1 - wy) * (1 - wx)),
        (0, 1, (1 - wy) * wx),
        (1, 0, wy * (1 - wx)),
        (1, 1, wy * wx),
    ):
        yy = y0 + oy
        xx = x0 + ox
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        out += img[:, yc, xc] * (weight * valid)
    return out


def _rotation(angle_rad):
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, -s], [s, c]])


# ---------------------------------------------------------------------------
# atomic ops; magnitude is in [0, 1], signed ops map it to (2m - 1) * range

def _img_identity(img, m, stream):
    return img


def _img_invert(img, m, stream):
    return (1 - m) * img + m * (1.0 - img)


def _img_solarize(img, m, stream):
    threshold = 1.0 - m
    return np.where(img >= threshold, 1.0 - img, img)


def _img_brightness(img, m, stream):
    return img + (2 * m - 1) * 0.3


def _img_contrast(img, m, stream):
    factor = 1.0 + (2 * m - 1) * 0.5
    return 0.5 + factor * (img - 0.5)


def _img_posterize(img, m, stream):
    bits = 8 - int(m * 4.999)          # 8 down to 4
    levels = (1 << bits) - 1
    return np.floor(img * levels + 0.5) / levels


def _img_rotate(img, m, stream):
    angle = (2 * m - 1) * np.deg2rad(30.0)
    return _warp_affine(img, _rotation(angle), (0.0, 0.0))


def _img_translate(img, m, stream):
    _, h, w = img.shape
    frac = (2 * m - 1) * 0.25
    return _warp_affine(img, np.eye(2), (frac * h, frac * w))


def _img_shear(img, m, stream):
    s = (2 * m - 1) * 0.3
    return _warp_affine(img, np.array([[1.0, s], [0.0, 1.0]]), (0.0, 0.0))


IMAGE_POOL = (
    ("identity", _img_identity),
    ("invert", _img_invert),
    ("solarize", _img_solarize),
    ("brightness", _img_brightness),
    ("contrast", _img_contrast),
    ("posterize", _img_posterize),
    ("rotate", _img_rotate),
    ("translate", _img_translate),
    ("shear", _img_shear),
)


def _vec_rotate(x, m, stream):
    angle = (2 * m - 1) * np.deg2rad(30.0)
    c, s = np.cos(angle), np.sin(angle)
    out = x.copy()
    out[0] = c * x[0] - s * x[1]
    out[1] = s * x[0] + c * x[1]
    return out


def _vec_scale(x, m, stream):
    return x * (0.8 + 0.4 * m)


def _vec_jitter(x, m, stream):
    return x + stream.normals(0, x.shape) * (m * 0.15)


VECTOR_POOL = (
    ("rotate2d", _vec_rotate),
    ("scale", _vec_scale),
    ("jitter", _vec_jitter),
)


@dataclass(frozen=True)
class TransformOp:
    kind: str
    magnitude: float

    def __post_init__(self):
        if not 0.0 <= self.magnitude <= 1.0:
            raise ConfigError(f"transform magnitude must be in [0,1], got {self.magnitude}")


# ---------------------------------------------------------------------------
# weak / strong transforms

def weak_seed(base_seed, sample_id, epoch) -> int:
    return seeding.fold_key(base_seed, seeding.TAG_WEAK, sample_id, epoch)


def variant_seed(base_seed, sample_id, epoch, j) -> int:
    return seeding.fold_key(base_seed, seeding.TAG_STRONG, sample_id, epoch, j)


def weak_augment(x, seed, vector_sigma=WEAK_VECTOR_SIGMA) -> np.ndarray:
    """Images: flip(p=1/2) then random crop with 4-pixel zero padding.
    Vectors: additive Gaussian noise. Shape-preserving, total.
    """
    x = np.asarray(x, dtype=np.float64)
    stream = seeding.DrawStream(seed)
    if x.ndim == 1:
        return x + stream.normals(0, x.shape) * vector_sigma
    c, h, w = x.shape
    out = x[:, :, ::-1] if stream.u64(0) & 1 else x
    pad = WEAK_CROP_PAD
    padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad)))
    oy = stream.integer(1, 2 * pad + 1)
    ox = stream.integer(2, 2 * pad + 1)
    return padded[:, oy:oy + h, ox:ox + w].copy()


def weak_augment_batch(features, keys, vector_sigma=WEAK_VECTOR_SIGMA) -> np.ndarray:
    """Vectorized weak_augment over a batch; bit-identical to the scalar path."""
    x = np.asarray(features, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.uint64)
    if x.ndim == 2:
        return x + seeding.batch_normals(keys, 0, x.shape[1]) * vector_sigma
    b, c, h, w = x.shape
    pad = WEAK_CROP_PAD
    flips = (seeding.batch_u64(keys, 0) & np.uint64(1)).astype(bool)
    out = x.copy()
    out[flips] = out[flips][:, :, :, ::-1]
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = (seeding.batch_u64(keys, 1) % np.uint64(2 * pad + 1)).astype(np.int64)
    ox = (seeding.batch_u64(keys, 2) % np.uint64(2 * pad + 1)).astype(np.int64)
    rows = oy[:, None, None, None] + np.arange(h)[None, None, :, None]
    cols = ox[:, None, None, None] + np.arange(w)[None, None, None, :]
    return padded[np.arange(b)[:, None, None, None],
                  np.arange(c)[None, :, None, None], rows, cols]


def strong_augment(x, seed, pool=None) -> np.ndarray:
    """Two pool ops drawn uniformly (with replacement), uniform magnitudes.

    Image outputs are clamped to [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    is_image = x.ndim == 3
    if pool is None:
        pool = IMAGE_POOL if is_image else VECTOR_POOL
    if len(pool) == 0:
        raise ConfigError("strong_augment: empty transform pool")
    stream = seeding.DrawStream(seed)
    out = x
    for t in range(N_STRONG_OPS):
        idx = stream.integer(2 * t, len(pool))
        magnitude = stream.uniform(2 * t + 1)
        _, fn = pool[idx]
        out = fn(out, magnitude, seeding.DrawStream(stream.subkey(1000 + t)))
    if is_image:
        out = np.clip(out, 0.0, 1.0)
    return out


def applied_ops(seed, pool) -> list:
    """Replay the op/magnitude draws a strong_augment call would make."""
    stream = seeding.DrawStream(seed)
    ops = []
    for t in range(N_STRONG_OPS):
        idx = stream.integer(2 * t, len(pool))
        magnitude = stream.uniform(2 * t + 1)
        ops.append(TransformOp(pool[idx][0], magnitude))
    return ops


# ---------------------------------------------------------------------------
# uncertainty sets

@dataclass
class UncertaintySet:
    sample_id: int
    variants: list          # K transformed feature arrays
    seed_keys: list         # per-variant stream key

    @property
    def k(self):
        return len(self.variants)


def build_uncertainty_set(x, k, base_seed, sample_id, epoch, pool=None) -> UncertaintySet:
    """K independent strong augmentations of one sample.

    Variant seeds depend on (base_seed, sample_id, epoch, j) only, never on
    K, which is what makes worst-case-vs-single-variant comparisons exact.
    """
    if k < 1:
        raise ConfigError(f"uncertainty set needs K >= 1, got {k}")
    variants, keys = [], []
    for j in range(k):
        seed = variant_seed(base_seed, sample_id, epoch, j)
        variants.append(strong_augment(x, seed, pool=pool))
        keys.append(seed)
    return UncertaintySet(sample_id=int(sample_id), variants=variants, seed_keys=keys)
