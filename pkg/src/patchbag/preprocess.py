"""Raw-image path: background removal, patch sampling, augmentation, and a
small trainable featurizer.

Images come in as binary 8-bit PGM (grayscale) or PPM (color). Otsu's
threshold on the grayscale histogram separates dark tissue from bright
background; fixed-size windows are sampled from the foreground, augmented
down to 224 x 224, and turned into feature vectors by a two-layer network
that participates in the autodiff graph.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    ConfigError,
    DegenerateHistogramError,
    InsufficientForegroundError,
    ParseError,
    SizeError,
)

PATCH_SIDE = 224          # final augmented patch side
POOL_SIDE = 28            # featurizer average-pool grid
LUMA = (0.299, 0.587, 0.114)
FOREGROUND_QUOTA = 0.5    # window must be at least half foreground


# ---------------------------------------------------------------------------
# PGM / PPM I/O (binary, 8-bit)
# ---------------------------------------------------------------------------


def read_pnm(path):
    with open(path, "rb") as fh:
        raw = fh.read()

    pos = 0

    def token():
        nonlocal pos
        while pos < len(raw):
            if raw[pos:pos + 1].isspace():
                pos += 1
            elif raw[pos:pos + 1] == b"#":
                while pos < len(raw) and raw[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated header")
        return raw[start:pos]

    magic = token()
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"{path}: unsupported magic {magic!r}, need binary P5/P6")
    width = int(token())
    height = int(token())
    maxval = int(token())
    if maxval != 255:
        raise ParseError(f"{path}: maxval must be 255, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    channels = 1 if magic == b"P5" else 3
    count = width * height * channels
    data = raw[pos:pos + count]
    if len(data) != count:
        raise ParseError(f"{path}: pixel data truncated ({len(data)} of {count} bytes)")
    arr = np.frombuffer(data, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width).copy()
    return arr.reshape(height, width, 3).copy()


def write_pnm(path, image) -> None:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim == 2:
        magic, h, w = b"P5", image.shape[0], image.shape[1]
    elif image.ndim == 3 and image.shape[2] == 3:
        magic, h, w = b"P6", image.shape[0], image.shape[1]
    else:
        raise SizeError(f"write_pnm: expected (H, W) or (H, W, 3), got {image.shape}")
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(image).tobytes())


def to_grayscale(image):
    image = np.asarray(image)
    if image.ndim == 2:
        return image.astype(np.uint8)
    luma = image[..., 0] * LUMA[0] + image[..., 1] * LUMA[1] + image[..., 2] * LUMA[2]
    return np.clip(np.rint(luma), 0, 255).astype(np.uint8)


def gray_histogram(gray):
    gray = np.asarray(gray, dtype=np.uint8)
    return np.bincount(gray.ravel(), minlength=256).astype(np.int64)


# ---------------------------------------------------------------------------
# Otsu thresholding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OtsuResult:
    threshold: int
    degenerate: bool    # histogram had a single occupied bin


def otsu_threshold(hist) -> OtsuResult:
    """Threshold maximizing between-class variance over all 256 cuts.

    Pixels <= threshold form the low class. Ties pick the smallest cut; a
    single-valued histogram returns that value with the degenerate flag set.
    """
    hist = np.asarray(hist, dtype=np.int64)
    if hist.shape != (256,) or np.any(hist < 0):
        raise ConfigError(f"otsu: need 256 non-negative counts, got shape {hist.shape}")
    total = int(hist.sum())
    if total == 0:
        raise DegenerateHistogramError("otsu: histogram has no mass")
    occupied = np.nonzero(hist)[0]
    if len(occupied) == 1:
        return OtsuResult(threshold=int(occupied[0]), degenerate=True)

    values = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist).astype(np.float64)            # mass at or below each cut
    s0 = np.cumsum(hist * values)                      # intensity mass below
    w1 = total - w0
    mu0 = np.divide(s0, w0, out=np.zeros(256), where=w0 > 0)
    mu1 = np.divide(s0[-1] - s0, w1, out=np.zeros(256), where=w1 > 0)
    between = w0 * w1 * (mu0 - mu1) ** 2               # scaled by total^2
    return OtsuResult(threshold=int(np.argmax(between)), degenerate=False)


def foreground_mask(gray, threshold: int):
    """Tissue mask: the dark class (values at or below the threshold)."""
    return np.asarray(gray) <= threshold


# ---------------------------------------------------------------------------
# patch sampling and augmentation
# ---------------------------------------------------------------------------


@dataclass
class PatchImage:
    pixels: np.ndarray              # (side, side) or (side, side, 3) uint8
    y: int
    x: int
    ops_log: tuple = ()

    @property
    def side(self) -> int:
        return self.pixels.shape[0]


def valid_anchors(mask, patch_size: int):
    """Top-left corners whose window is inside bounds and mostly foreground."""
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    if h < patch_size or w < patch_size:
        return np.empty((0, 2), dtype=np.int64)
    # integral image makes every window sum O(1)
    ii = np.zeros((h + 1, w + 1))
    ii[1:, 1:] = mask.cumsum(axis=0).cumsum(axis=1)
    p = patch_size
    sums = ii[p:, p:] - ii[:-p, p:] - ii[p:, :-p] + ii[:-p, :-p]
    ys, xs = np.nonzero(sums >= FOREGROUND_QUOTA * p * p)
    return np.stack([ys, xs], axis=1).astype(np.int64)


def sample_patches(image, mask, count: int, patch_size: int, seed):
    """Uniformly sample `count` valid windows without replacement."""
    image = np.asarray(image)
    anchors = valid_anchors(mask, patch_size)
    if len(anchors) < count:
        raise InsufficientForegroundError(found=len(anchors), needed=count)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(anchors), size=count, replace=False)
    patches = []
    for y, x in anchors[chosen]:
        pixels = np.ascontiguousarray(image[y:y + patch_size, x:x + patch_size])
        patches.append(PatchImage(pixels=pixels, y=int(y), x=int(x)))
    return patches


@dataclass(frozen=True)
class AugmentChoices:
    crop_y: int
    crop_x: int
    flip_h: bool
    flip_v: bool
    quarter_turns: int


def apply_augment(patch: PatchImage, choices: AugmentChoices) -> PatchImage:
    """Crop to 224, flip horizontally/vertically, rotate by quarter turns."""
    side = patch.side
    if side < PATCH_SIDE:
        raise SizeError(f"augment: patch side {side} < {PATCH_SIDE}")
    if not (0 <= choices.crop_y <= side - PATCH_SIDE
            and 0 <= choices.crop_x <= side - PATCH_SIDE):
        raise SizeError(f"augment: crop offset {choices.crop_y},{choices.crop_x} "
                        f"out of range for side {side}")
    out = patch.pixels[choices.crop_y:choices.crop_y + PATCH_SIDE,
                       choices.crop_x:choices.crop_x + PATCH_SIDE]
    log = list(patch.ops_log)
    log.append(f"crop:y={choices.crop_y},x={choices.crop_x}")
    if choices.flip_h:
        out = out[:, ::-1]
    log.append(f"flip_h:{int(choices.flip_h)}")
    if choices.flip_v:
        out = out[::-1, :]
    log.append(f"flip_v:{int(choices.flip_v)}")
    k = choices.quarter_turns % 4
    if k:
        out = np.rot90(out, k=k, axes=(0, 1))
    log.append(f"rot90:{k}")
    return PatchImage(pixels=np.ascontiguousarray(out), y=patch.y, x=patch.x,
                      ops_log=tuple(log))


def augment(patch: PatchImage, seed) -> PatchImage:
    """Seeded random crop + 50/50 flips + quarter-turn rotation."""
    side = patch.side
    if side < PATCH_SIDE:
        raise SizeError(f"augment: patch side {side} < {PATCH_SIDE}")
    rng = np.random.default_rng(seed)
    choices = AugmentChoices(
        crop_y=int(rng.integers(side - PATCH_SIDE + 1)),
        crop_x=int(rng.integers(side - PATCH_SIDE + 1)),
        flip_h=bool(rng.random() < 0.5),
        flip_v=bool(rng.random() < 0.5),
        quarter_turns=int(rng.integers(4)),
    )
    return apply_augment(patch, choices)


# ---------------------------------------------------------------------------
# featurizer: pooled pixels + channel stats -> two affine+ReLU layers
# ---------------------------------------------------------------------------

STATS_LEN = 6
POOL_LEN = POOL_SIDE * POOL_SIDE
FEAT_INPUT_LEN = POOL_LEN + STATS_LEN


@dataclass
class FeaturizerParams:
    hidden_dim: int
    out_dim: int
    seed: int
    w1: Tensor = field(repr=False, default=None)
    b1: Tensor = field(repr=False, default=None)
    w2: Tensor = field(repr=False, default=None)
    b2: Tensor = field(repr=False, default=None)

    @classmethod
    def initialize(cls, hidden_dim: int = 128, out_dim: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)

        def mat(rows, cols):
            bound = math.sqrt(1.0 / rows)
            return Tensor(rng.uniform(-bound, bound, (rows, cols)), requires_grad=True)

        return cls(
            hidden_dim=hidden_dim, out_dim=out_dim, seed=seed,
            w1=mat(FEAT_INPUT_LEN, hidden_dim),
            b1=Tensor(np.zeros((1, hidden_dim)), requires_grad=True),
            w2=mat(hidden_dim, out_dim),
            b2=Tensor(np.zeros((1, out_dim)), requires_grad=True),
        )

    def named_parameters(self):
        return [("feat.w1", self.w1), ("feat.b1", self.b1),
                ("feat.w2", self.w2), ("feat.b2", self.b2)]

    def parameters(self):
        return [t for _, t in self.named_parameters()]


def pooled_stats(pixels):
    """Fixed 790-vector: 28x28 block-averaged luma plus channel mean/std."""
    pixels = np.asarray(pixels)
    if pixels.shape[:2] != (PATCH_SIDE, PATCH_SIDE):
        raise SizeError(f"featurize: need {PATCH_SIDE}x{PATCH_SIDE} pixels, "
                        f"got {pixels.shape}")
    gray = to_grayscale(pixels).astype(np.float64) / 255.0
    block = PATCH_SIDE // POOL_SIDE
    pooled = gray.reshape(POOL_SIDE, block, POOL_SIDE, block).mean(axis=(1, 3))
    if pixels.ndim == 3:
        chans = pixels.astype(np.float64) / 255.0
        stats = np.concatenate([chans.mean(axis=(0, 1)), chans.std(axis=(0, 1))])
    else:
        g = gray
        stats = np.array([g.mean()] * 3 + [g.std()] * 3)
    return np.concatenate([pooled.ravel(), stats])


def featurize(patch: PatchImage, fparams: FeaturizerParams) -> Tensor:
    """Differentiable feature vector of length out_dim for one patch."""
    x = Tensor(pooled_stats(patch.pixels).reshape(1, FEAT_INPUT_LEN))
    h = ad.relu(ad.add(ad.matmul(x, fparams.w1), fparams.b1))
    y = ad.relu(ad.add(ad.matmul(h, fparams.w2), fparams.b2))
    return ad.reshape(y, (fparams.out_dim,))


def image_to_features(image, count: int, patch_size: int,
                      fparams: FeaturizerParams, seed):
    """Full pipeline for one raster: mask, sample, augment, featurize.

    `seed` may be an int or a numpy SeedSequence. Returns
    (features (count, out_dim) float64 array, patch list).
    """
    gray = to_grayscale(image)
    result = otsu_threshold(gray_histogram(gray))
    if result.degenerate:
        # single-intensity image: nothing separable from background
        raise InsufficientForegroundError(found=0, needed=count)
    mask = foreground_mask(gray, result.threshold)
    if isinstance(seed, np.random.SeedSequence):
        root = seed
    else:
        root = np.random.SeedSequence(seed)
    sample_ss, augment_ss = root.spawn(2)
    patches = sample_patches(image, mask, count, patch_size, sample_ss)
    rows = []
    final = []
    for patch, stream in zip(patches, augment_ss.spawn(count)):
        aug = augment(patch, seed=stream)  # default_rng accepts SeedSequence
        final.append(aug)
        rows.append(featurize(aug, fparams).data)
    return np.stack(rows), final
