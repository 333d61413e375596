"""Deterministic synthetic scenes standing in for the frozen image encoders.

A scene is a flat background segment with axis-aligned rectangles painted on
top. The semantic feature map carries each pixel's class embedding plus noise;
the localization feature map carries a per-instance embedding plus noise, so
the two backbones are class- and instance-discriminative respectively. All
generated arrays are float64 in memory but quantized to float32 values so the
binary feature files round-trip bit-exactly.

Feature file format ("FZSG", little-endian):
    magic "FZSG" | u32 version=1 | u32 H | u32 W | u32 D | u8 scale code |
    H*W*D float32, row-major (y, x, channel)
The scale code is the resolution denominator: 1 = full, then 8, 16, 32.

Text bank format ("FZTB", little-endian):
    magic "FZTB" | u32 C | u32 D | C x (u32 name length, utf-8 bytes) |
    C*D float32 rows
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, SizeError

FEATURE_MAGIC = b"FZSG"
FEATURE_VERSION = 1
BANK_MAGIC = b"FZTB"

SCALE_CODES = (1, 8, 16, 32)

# Pixel grid that ground-truth rectangles snap to, so masks stay representable
# at the coarsest mask-head resolution.
SNAP = 8


@dataclass
class FeatureGrid:
    """Dense H x W x D feature map at a stated resolution denominator."""
    height: int
    width: int
    channels: int
    scale: int  # denominator: 1 (full), 8, 16 or 32
    data: np.ndarray  # (H, W, D) float64

    def __post_init__(self):
        if self.scale not in SCALE_CODES:
            raise ConfigError(f"unsupported scale denominator {self.scale}")
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (self.height, self.width, self.channels):
            raise ConfigError(
                f"feature data shape {self.data.shape} != "
                f"({self.height}, {self.width}, {self.channels})")

    def tokens(self) -> np.ndarray:
        """Flatten to (H*W, D), row-major."""
        return self.data.reshape(-1, self.channels)


@dataclass
class SceneSpec:
    seed: int
    height: int = 64
    width: int = 64
    classes: int = 8
    seen_classes: int = 6
    instances: int = 6
    dim: int = 32
    noise_sigma: float = 0.1
    # Which classes instances may take: "all" or "seen" (training vocabulary).
    class_pool: str = "all"
    # Scenes of one dataset share a bank: same bank_seed, different seed.
    bank_seed: int | None = None

    def __post_init__(self):
        if self.seen_classes < 1 or self.seen_classes > self.classes:
            raise ConfigError("need 1 <= seen_classes <= classes")
        if self.instances < 1:
            raise ConfigError("need at least one instance")
        if self.class_pool not in ("all", "seen"):
            raise ConfigError(f"unknown class pool {self.class_pool!r}")


@dataclass
class GroundTruth:
    """Per-pixel segment ids (contiguous from 0) and each segment's class."""
    panoptic: np.ndarray  # (H, W) int64 segment ids
    segment_classes: list[int]

    def instance_masks(self) -> list[np.ndarray]:
        return [self.panoptic == i for i in range(len(self.segment_classes))]

    def semantic_map(self) -> np.ndarray:
        lut = np.asarray(self.segment_classes, dtype=np.int64)
        return lut[self.panoptic]


@dataclass
class TextEmbeddingBank:
    embeddings: np.ndarray  # (C, D), unit-norm rows, float32-representable
    class_names: list[str]
    is_seen: np.ndarray  # (C,) bool

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.is_seen = np.asarray(self.is_seen, dtype=bool)

    @property
    def num_classes(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class Scene:
    """One generated scene: semantic pyramid, localization grid, GT, bank."""
    clip: dict[int, FeatureGrid]  # keys: 1 (full), 8, 16, 32
    sam: FeatureGrid              # single scale, 1/16
    gt: GroundTruth
    bank: TextEmbeddingBank


def _quantize(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def generate_bank(seed: int, classes: int, seen_classes: int, dim: int) -> TextEmbeddingBank:
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(classes, dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    names = [f"class_{i:02d}" for i in range(classes)]
    is_seen = np.arange(classes) < seen_classes
    return TextEmbeddingBank(_quantize(emb), names, is_seen)


def _paint_segments(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    seg = np.zeros((spec.height, spec.width), dtype=np.int64)
    for k in range(1, spec.instances):
        max_y = spec.height // SNAP
        max_x = spec.width // SNAP
        y0 = int(rng.integers(0, max_y - 1))
        x0 = int(rng.integers(0, max_x - 1))
        y1 = int(rng.integers(y0 + 1, max_y + 1))
        x1 = int(rng.integers(x0 + 1, max_x + 1))
        seg[y0 * SNAP:y1 * SNAP, x0 * SNAP:x1 * SNAP] = k
    # Later rectangles may have buried earlier ones; compact the ids.
    kept = np.unique(seg)
    remap = np.full(seg.max() + 1, -1, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    return remap[seg]


def _assign_classes(rng: np.random.Generator, spec: SceneSpec,
                    n_segments: int, is_seen: np.ndarray) -> list[int]:
    if spec.class_pool == "seen":
        pool = np.flatnonzero(is_seen)
    else:
        pool = np.arange(spec.classes)
    classes = [int(rng.choice(pool)) for _ in range(n_segments)]
    if spec.class_pool == "all" and n_segments >= 2:
        unseen = np.flatnonzero(~is_seen)
        seen = np.flatnonzero(is_seen)
        # Open-vocabulary scenes should exercise both vocabularies.
        if len(unseen) and not any(not is_seen[c] for c in classes):
            classes[-1] = int(rng.choice(unseen))
        if len(seen) and not any(is_seen[c] for c in classes):
            classes[0] = int(rng.choice(seen))
    return classes


def _avg_pool2(a: np.ndarray) -> np.ndarray:
    h, w, d = a.shape
    return a.reshape(h // 2, 2, w // 2, 2, d).mean(axis=(1, 3))


def generate_scene(spec: SceneSpec) -> Scene:
    """Build one deterministic scene from its spec.

    The semantic pyramid is produced by chained 2x average pooling of the
    full-resolution map; the localization grid lives at 1/16 resolution with
    segment ids sampled at block centers.
    """
    if spec.height % 32 or spec.width % 32:
        raise SizeError(f"image size {spec.height}x{spec.width} must be divisible by 32")
    bank = generate_bank(spec.bank_seed if spec.bank_seed is not None else spec.seed,
                         spec.classes, spec.seen_classes, spec.dim)
    rng = np.random.default_rng(spec.seed)

    seg = _paint_segments(rng, spec)
    n_segments = int(seg.max()) + 1
    classes = _assign_classes(rng, spec, n_segments, bank.is_seen)
    gt = GroundTruth(seg, classes)

    class_map = np.asarray(classes, dtype=np.int64)[seg]
    clip_full = bank.embeddings[class_map]
    if spec.noise_sigma > 0:
        clip_full = clip_full + spec.noise_sigma * rng.normal(size=clip_full.shape)
    clip_full = _quantize(clip_full)

    clip: dict[int, FeatureGrid] = {
        1: FeatureGrid(spec.height, spec.width, spec.dim, 1, clip_full)}
    level = clip_full
    denom = 1
    while denom < 32:
        level = _avg_pool2(level)
        denom *= 2
        if denom in (8, 16, 32):
            clip[denom] = FeatureGrid(spec.height // denom, spec.width // denom,
                                      spec.dim, denom, _quantize(level))

    inst_emb = rng.normal(size=(n_segments, spec.dim))
    inst_emb /= np.linalg.norm(inst_emb, axis=1, keepdims=True)
    sh, sw = spec.height // 16, spec.width // 16
    centers = seg[8::16, 8::16]  # segment id at each 16x16 block center
    sam_data = inst_emb[centers]
    if spec.noise_sigma > 0:
        sam_data = sam_data + spec.noise_sigma * rng.normal(size=sam_data.shape)
    sam = FeatureGrid(sh, sw, spec.dim, 16, _quantize(sam_data))

    return Scene(clip, sam, gt, bank)


def synthetic_proposals(gt: GroundTruth, seed: int, max_shift: int = 4,
                        drop_background: bool = False) -> np.ndarray:
    """Perturbed copies of the GT masks, standing in for zero-shot proposals.

    Each mask is shifted by up to `max_shift` pixels in each direction, which
    keeps IoU with its source high but not perfect.
    """
    rng = np.random.default_rng(seed)
    masks = []
    for i, mask in enumerate(gt.instance_masks()):
        if drop_background and i == 0:
            continue
        dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
        shifted = np.zeros_like(mask)
        h, w = mask.shape
        ys, xs = np.nonzero(mask)
        ys = np.clip(ys + dy, 0, h - 1)
        xs = np.clip(xs + dx, 0, w - 1)
        shifted[ys, xs] = True
        masks.append(shifted)
    if not masks:
        return np.zeros((0,) + gt.panoptic.shape, dtype=bool)
    return np.stack(masks)


# -- FZSG feature files -------------------------------------------------------

def save_feature_file(path, grid: FeatureGrid) -> None:
    payload = grid.data.astype("<f4").tobytes()
    header = FEATURE_MAGIC + struct.pack(
        "<IIIIB", FEATURE_VERSION, grid.height, grid.width, grid.channels, grid.scale)
    Path(path).write_bytes(header + payload)


def load_feature_file(path) -> FeatureGrid:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}", 0)
    if len(raw) < 8:
        raise FormatError("truncated before version field", 4)
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if len(raw) < 21:
        raise FormatError("truncated header", len(raw))
    h, w, d, scale = struct.unpack_from("<IIIB", raw, 8)
    if scale not in SCALE_CODES:
        raise FormatError(f"unknown scale code {scale}", 20)
    expected = h * w * d * 4
    if len(raw) - 21 != expected:
        raise FormatError(
            f"payload is {len(raw) - 21} bytes, declared {h}x{w}x{d} needs {expected}", 21)
    data = np.frombuffer(raw, dtype="<f4", offset=21).astype(np.float64).reshape(h, w, d)
    return FeatureGrid(h, w, d, int(scale), data)


# -- FZTB text-embedding banks ------------------------------------------------

def save_bank_file(path, bank: TextEmbeddingBank) -> None:
    parts = [BANK_MAGIC, struct.pack("<II", bank.num_classes, bank.dim)]
    for name in bank.class_names:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
    parts.append(bank.embeddings.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_bank_file(path, is_seen: np.ndarray | None = None) -> TextEmbeddingBank:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != BANK_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {BANK_MAGIC!r}", 0)
    if len(raw) < 12:
        raise FormatError("truncated header", len(raw))
    c, d = struct.unpack_from("<II", raw, 4)
    offset = 12
    names = []
    for _ in range(c):
        if len(raw) < offset + 4:
            raise FormatError("truncated name length", offset)
        (n,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        if len(raw) < offset + n:
            raise FormatError("truncated name bytes", offset)
        names.append(raw[offset:offset + n].decode("utf-8"))
        offset += n
    expected = c * d * 4
    if len(raw) - offset != expected:
        raise FormatError(
            f"embedding payload is {len(raw) - offset} bytes, expected {expected}", offset)
    emb = np.frombuffer(raw, dtype="<f4", offset=offset).astype(np.float64).reshape(c, d)
    if is_seen is None:
        is_seen = np.ones(c, dtype=bool)
    return TextEmbeddingBank(emb, names, is_seen)
