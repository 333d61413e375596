"""Inference-time ensembling and decoding of segmentation outputs.

Class probabilities from the decoder and from mask-pooled semantic features
are combined geometrically (exponent alpha for training-vocabulary classes,
beta otherwise). Per-class score maps are the probability-weighted sums of
mask probabilities; for classes outside the training vocabulary the score map
is blended with one built from zero-shot proposal masks (weight epsilon).
Semantic decoding is a per-pixel argmax; panoptic decoding assigns each pixel
to the best-scoring non-no-object query.

Proposal file format ("FZPM", little-endian):
    magic "FZPM" | u32 count | u32 H | u32 W |
    per mask: u32 run count, then run lengths (u32), row-major, alternating
    values starting with 0; runs must sum to H*W.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decoder import clip_classify_masks
from .errors import ConfigError, DimensionError, FormatError
from .fixtures import FeatureGrid, TextEmbeddingBank

PROPOSAL_MAGIC = b"FZPM"

# Pixels whose best query score falls below this floor become void, and
# segments smaller than MIN_SEGMENT_AREA pixels are dropped (tuned for the
# 64x64 desk scale).
SCORE_FLOOR = 0.25
MIN_SEGMENT_AREA = 32


@dataclass
class EnsembleConfig:
    alpha: float = 0.4    # geometric weight of the pooled-feature branch, seen classes
    beta: float = 0.8     # same, unseen classes
    epsilon: float = 0.2  # blend weight of proposal-derived score maps, unseen classes
    xi: float = 0.5       # keep proposals whose best class probability exceeds this

    def __post_init__(self):
        for name in ("alpha", "beta", "epsilon", "xi"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")


@dataclass
class SamProposalSet:
    """Zero-shot proposal masks with pooled-feature class scores."""
    masks: np.ndarray   # (N', H, W) bool
    scores: np.ndarray  # (N', C)

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.masks.shape[0] != self.scores.shape[0]:
            raise DimensionError("proposal mask/score count mismatch")

    @property
    def count(self) -> int:
        return self.masks.shape[0]


@dataclass
class PanopticMap:
    """Per-pixel segment ids (-1 = void) plus each segment's class and score."""
    segments: np.ndarray             # (H, W) int64
    classes: dict[int, int]          # segment id -> class id
    scores: dict[int, float]         # segment id -> confidence


def class_ensemble(p_d: np.ndarray, p_cl: np.ndarray, cfg: EnsembleConfig,
                   is_seen: np.ndarray, renormalize: bool = True) -> np.ndarray:
    """Geometric combination of detector and pooled-feature class probabilities.

    Inputs are (N, C+1) with the no-object column last; that column is taken
    from the detector untouched. With `renormalize` each row is rescaled to
    sum to one over all C+1 entries, which preserves the argmax.
    """
    if p_d.shape != p_cl.shape:
        raise DimensionError(f"shape mismatch {p_d.shape} vs {p_cl.shape}")
    c = p_d.shape[1] - 1
    if is_seen.shape != (c,):
        raise DimensionError(f"is_seen has {is_seen.shape[0]} entries for {c} classes")
    expo = np.where(is_seen, cfg.alpha, cfg.beta)
    combined = p_d[:, :c] ** (1.0 - expo) * p_cl[:, :c] ** expo
    out = np.concatenate([combined, p_d[:, c:]], axis=1)
    if renormalize:
        total = out.sum(axis=1, keepdims=True)
        out = np.divide(out, total, out=np.zeros_like(out), where=total > 0)
    return out


def build_sam_proposals(masks: np.ndarray, clip_full: FeatureGrid,
                        bank: TextEmbeddingBank, xi: float,
                        tau: float = 20.0) -> SamProposalSet:
    """Score binary proposal masks and keep those confidently classified.

    A proposal survives when its best class probability exceeds `xi`.
    """
    masks = np.asarray(masks, dtype=bool)
    if masks.shape[0] == 0:
        return SamProposalSet(masks.reshape(0, *masks.shape[1:]),
                              np.zeros((0, bank.num_classes)))
    logits = np.where(masks, 1.0, -1.0)
    scored = clip_classify_masks(logits, clip_full, bank, tau)[:, :-1]
    keep = scored.max(axis=1) > xi
    return SamProposalSet(masks[keep], scored[keep])


def semantic_aggregate(class_probs: np.ndarray, mask_probs: np.ndarray) -> np.ndarray:
    """Per-class score maps: r[c] = sum_i p_i(c) * m_i.

    `class_probs` is (N, C) (no-object excluded by the caller); `mask_probs`
    holds mask probabilities in [0, 1] (sigmoid of logits, or 0/1 proposals).
    The accumulation loops over masks so it matches a brute-force sum exactly.
    """
    if class_probs.shape[0] != mask_probs.shape[0]:
        raise DimensionError("class/mask count mismatch")
    n, c = class_probs.shape
    out = np.zeros((c,) + mask_probs.shape[1:])
    for i in range(n):
        out += class_probs[i][:, None, None] * mask_probs[i][None]
    return out


def mask_ensemble(r: np.ndarray, r_hat: np.ndarray, epsilon: float,
                  is_seen: np.ndarray) -> np.ndarray:
    """Blend decoder-derived and proposal-derived score maps on unseen classes.

    Seen-class channels pass through unchanged for any epsilon.
    """
    if r.shape != r_hat.shape:
        raise DimensionError(f"score map shapes differ: {r.shape} vs {r_hat.shape}")
    out = r.copy()
    unseen = ~np.asarray(is_seen, dtype=bool)
    out[unseen] = (1.0 - epsilon) * r[unseen] + epsilon * r_hat[unseen]
    return out


def semantic_decode(scores: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over class score maps; ties go to the lowest class."""
    return np.argmax(scores, axis=0).astype(np.int64)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def panoptic_decode(class_probs: np.ndarray, mask_logits: np.ndarray,
                    min_area: int = MIN_SEGMENT_AREA,
                    score_floor: float = SCORE_FLOOR) -> PanopticMap:
    """Assign each pixel to the query maximizing p_i(c_i) * m_i[x, y].

    Queries whose most likely class is no-object are discarded. Pixels whose
    best score falls below `score_floor` and segments smaller than `min_area`
    become void (-1). Proposal-derived score maps never enter here: panoptic
    quality hinges on individual queries, so blending class-agnostic masks in
    would dilute them.
    """
    n, c_plus_1 = class_probs.shape
    m = np.asarray(mask_logits, dtype=np.float64)
    if m.ndim != 3 or m.shape[0] != n:
        raise DimensionError(f"mask logits {m.shape} do not match {n} queries")
    h, w = m.shape[1:]
    best_class = np.argmax(class_probs, axis=1)
    keep = best_class < c_plus_1 - 1  # last column is no-object
    segments = np.full((h, w), -1, dtype=np.int64)
    classes: dict[int, int] = {}
    scores: dict[int, float] = {}
    if not keep.any():
        return PanopticMap(segments, classes, scores)

    kept_idx = np.flatnonzero(keep)
    conf = class_probs[kept_idx, best_class[kept_idx]]
    pixel_scores = conf[:, None, None] * sigmoid(m[kept_idx])
    winner = np.argmax(pixel_scores, axis=0)
    winner_score = np.take_along_axis(pixel_scores, winner[None], axis=0)[0]
    assigned = np.where(winner_score >= score_floor, winner, -1)

    next_id = 0
    for k, qi in enumerate(kept_idx):
        mask = assigned == k
        if mask.sum() < min_area:
            continue
        segments[mask] = next_id
        classes[next_id] = int(best_class[qi])
        scores[next_id] = float(conf[k])
        next_id += 1
    return PanopticMap(segments, classes, scores)


# -- FZPM proposal mask files ---------------------------------------------------

def _encode_rle(mask: np.ndarray) -> list[int]:
    flat = mask.reshape(-1).astype(np.int8)
    runs = []
    current = 0
    length = 0
    for v in flat:
        if v == current:
            length += 1
        else:
            runs.append(length)
            current = 1 - current
            length = 1
    runs.append(length)
    return runs


def save_proposal_file(path, masks: np.ndarray) -> None:
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim != 3:
        raise DimensionError(f"proposal masks must be (N, H, W), got {masks.shape}")
    n, h, w = masks.shape
    parts = [PROPOSAL_MAGIC, struct.pack("<III", n, h, w)]
    for mask in masks:
        runs = _encode_rle(mask)
        parts.append(struct.pack("<I", len(runs)))
        parts.append(struct.pack(f"<{len(runs)}I", *runs))
    Path(path).write_bytes(b"".join(parts))


def load_proposal_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != PROPOSAL_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {PROPOSAL_MAGIC!r}", 0)
    if len(raw) < 16:
        raise FormatError("truncated header", len(raw))
    n, h, w = struct.unpack_from("<III", raw, 4)
    offset = 16
    masks = np.zeros((n, h * w), dtype=bool)
    for i in range(n):
        record_offset = offset
        if len(raw) < offset + 4:
            raise FormatError(f"truncated run count for mask {i}", offset)
        (count,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        if len(raw) < offset + 4 * count:
            raise FormatError(f"truncated runs for mask {i}", offset)
        runs = struct.unpack_from(f"<{count}I", raw, offset)
        offset += 4 * count
        if sum(runs) != h * w:
            raise FormatError(
                f"mask {i} runs sum to {sum(runs)}, expected {h * w}", record_offset)
        pos = 0
        value = False
        for run in runs:
            if value:
                masks[i, pos:pos + run] = True
            pos += run
            value = not value
    return masks.reshape(n, h, w)
