"""Spatial-feature injection primitives.

`mask_pool` averages a feature map over each mask's foreground; `query_inject`
adds a projection of pooled localization features to the decoder queries;
`feature_inject` enriches semantic tokens with localization tokens through
multi-head cross-attention. The bilinear resampling helpers used to align
grids across scales also live here (resampling is linear, so the
differentiable path is just a matmul with a precomputed operator).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LinearParams, Parameter, Tensor
from .errors import ConfigError, DimensionError
from .fixtures import FeatureGrid

# Foreground test applied to mask logits: sigmoid(x) > 0.5 <=> x > 0.
MASK_LOGIT_THRESHOLD = 0.0


def _flat_masks(mask_logits: np.ndarray) -> np.ndarray:
    m = np.asarray(mask_logits, dtype=np.float64)
    if m.ndim == 3:
        m = m.reshape(m.shape[0], -1)
    if m.ndim != 2:
        raise DimensionError(f"mask logits must be (N, H, W) or (N, T), got {m.shape}")
    return m


def _flat_features(features) -> np.ndarray:
    if isinstance(features, FeatureGrid):
        return features.tokens()
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 3:
        f = f.reshape(-1, f.shape[-1])
    if f.ndim != 2:
        raise DimensionError(f"features must be (H, W, D) or (T, D), got {f.shape}")
    return f


def mask_pool(mask_logits, features) -> np.ndarray:
    """Mean feature vector over each mask's foreground pixels.

    Row i averages the feature vectors where sigmoid(logit_i) > 0.5. A mask
    with no foreground falls back to the global feature mean, which keeps
    early-training pools finite.
    """
    m = _flat_masks(mask_logits)
    f = _flat_features(features)
    if m.shape[1] != f.shape[0]:
        raise DimensionError(
            f"mask area {m.shape[1]} != feature area {f.shape[0]} (caller resizes)")
    fg = m > MASK_LOGIT_THRESHOLD
    counts = fg.sum(axis=1)
    pooled = np.empty((m.shape[0], f.shape[1]))
    global_mean = f.mean(axis=0)
    for i in range(m.shape[0]):
        pooled[i] = f[fg[i]].mean(axis=0) if counts[i] else global_mean
    return pooled


def query_inject(queries, mask_logits, sam_features, proj: LinearParams) -> Tensor:
    """Add projected mask-pooled localization features to the queries.

    The pooled matrix enters the tape as a constant: the hard foreground
    threshold has zero gradient almost everywhere, so only the projection
    receives gradients (the backbone features are frozen anyway).
    """
    q = queries if isinstance(queries, Tensor) else ad.constant(queries)
    pooled = ad.constant(mask_pool(mask_logits, sam_features))
    return ad.add(q, ad.linear(pooled, proj))


@dataclass
class AttentionParams:
    """Projections for multi-head attention over D-dimensional tokens."""
    query: LinearParams
    key: LinearParams
    value: LinearParams
    out: LinearParams
    heads: int

    def __post_init__(self):
        dim = self.query.weight.shape[1]
        if dim % self.heads:
            raise ConfigError(f"dim {dim} not divisible by {self.heads} heads")

    def parameters(self) -> list[Parameter]:
        return [p for lp in (self.query, self.key, self.value, self.out)
                for p in lp.parameters()]


def attention_params(rng: np.random.Generator, dim: int, heads: int) -> AttentionParams:
    return AttentionParams(
        query=ad.linear_params(rng, dim, dim),
        key=ad.linear_params(rng, dim, dim),
        value=ad.linear_params(rng, dim, dim),
        out=ad.linear_params(rng, dim, dim),
        heads=heads,
    )


def identity_attention_params(dim: int, heads: int = 1) -> AttentionParams:
    return AttentionParams(ad.identity_linear(dim), ad.identity_linear(dim),
                           ad.identity_linear(dim), ad.identity_linear(dim), heads)


def multi_head_attention(queries: Tensor, keys: Tensor, values: Tensor,
                         params: AttentionParams, mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """Scaled dot-product attention, softmax over key positions per head.

    `mask` is boolean (n_query, n_key), True where attending is allowed; the
    scaling uses the per-head dimension.
    """
    q = ad.linear(queries, params.query)
    k = ad.linear(keys, params.key)
    v = ad.linear(values, params.value)
    dim = q.shape[1]
    head_dim = dim // params.heads
    scale = 1.0 / np.sqrt(head_dim)

    head_outputs = []
    weight_sum = None
    for h in range(params.heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        scores = ad.scale(ad.matmul(ad.slice_cols(q, lo, hi),
                                    ad.transpose(ad.slice_cols(k, lo, hi))), scale)
        weights = ad.softmax_rows(scores, mask=mask)
        head_outputs.append(ad.matmul(weights, ad.slice_cols(v, lo, hi)))
        if return_weights:
            weight_sum = weights.value if weight_sum is None else weight_sum + weights.value
    merged = functools.reduce(ad.concat_cols, head_outputs)
    out = ad.linear(merged, params.out)
    if return_weights:
        return out, weight_sum / params.heads
    return out


def feature_inject(clip_tokens: Tensor, sam_tokens: Tensor, params: AttentionParams,
                   residual: bool = True) -> Tensor:
    """Cross-attend semantic tokens (queries) into localization tokens.

    With `residual` the attention output augments the semantic tokens; without
    it the raw attention output is returned.
    """
    attended = multi_head_attention(clip_tokens, sam_tokens, sam_tokens, params)
    return ad.add(clip_tokens, attended) if residual else attended


# -- bilinear resampling -------------------------------------------------------

@functools.lru_cache(maxsize=None)
def _interp_1d(src: int, dst: int) -> np.ndarray:
    """(dst, src) row-interpolation operator, half-pixel-center convention."""
    op = np.zeros((dst, src))
    for i in range(dst):
        x = (i + 0.5) * src / dst - 0.5
        x0 = int(np.floor(x))
        frac = x - x0
        a = min(max(x0, 0), src - 1)
        b = min(max(x0 + 1, 0), src - 1)
        op[i, a] += 1.0 - frac
        op[i, b] += frac
    return op


@functools.lru_cache(maxsize=None)
def bilinear_operator(src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> np.ndarray:
    """Flattened-plane resize operator of shape (dst_h*dst_w, src_h*src_w)."""
    ah = _interp_1d(src_hw[0], dst_hw[0])
    aw = _interp_1d(src_hw[1], dst_hw[1])
    return np.kron(ah, aw)


def resize_plane(plane: np.ndarray, dst_hw: tuple[int, int]) -> np.ndarray:
    src_hw = plane.shape
    op = bilinear_operator(src_hw, dst_hw)
    return (op @ plane.reshape(-1)).reshape(dst_hw)


def resize_stack(stack: np.ndarray, dst_hw: tuple[int, int]) -> np.ndarray:
    """Resize a stack of planes (N, h, w) -> (N, H, W)."""
    n = stack.shape[0]
    op = bilinear_operator(stack.shape[1:], dst_hw)
    flat = stack.reshape(n, -1) @ op.T
    return flat.reshape(n, *dst_hw)


def resize_grid(grid: FeatureGrid, dst_hw: tuple[int, int], scale: int) -> FeatureGrid:
    """Resize a feature grid's spatial extent, channelwise."""
    planes = np.moveaxis(grid.data, -1, 0)  # (D, h, w)
    resized = resize_stack(planes, dst_hw)
    return FeatureGrid(dst_hw[0], dst_hw[1], grid.channels, scale,
                       np.moveaxis(resized, 0, -1))
