"""Trainable masked-attention transformer decoder over multiscale tokens.

Layers attend queries to semantic tokens at a per-layer scale (coarse-to-fine
round robin), each restricting cross-attention to the foreground of the
previous layer's predicted masks. Spatial queries pooled from the localization
grid are added at configured layers; the coarsest token grid is enriched by
cross-attention into localization tokens at configured layers. Every layer
emits class probabilities (cosine against the text bank plus a trainable
no-object logit) and mask logits (mask-embedding MLP dotted with projected
1/8-scale pixel features).

Checkpoint format ("FZCK", little-endian):
    magic "FZCK" | u32 version=1 | u32 tensor count |
    per tensor: u32 name length, utf-8 name, u32 rank, rank x u32 dims,
    float64 payload (row-major)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import injectors as inj
from .autodiff import LinearParams, Parameter, Tensor
from .errors import ConfigError, FormatError
from .fixtures import FeatureGrid, TextEmbeddingBank

CHECKPOINT_MAGIC = b"FZCK"
CHECKPOINT_VERSION = 1

# Coarse-to-fine cycle of resolution denominators for successive layers.
SCALE_CYCLE = (32, 16, 8)


def round_robin_schedule(layers: int) -> tuple[int, ...]:
    return tuple(SCALE_CYCLE[i % len(SCALE_CYCLE)] for i in range(layers))


@dataclass
class DecoderConfig:
    layers: int = 9
    queries: int = 32
    dim: int = 32
    heads: int = 4
    query_inject_layers: tuple[int, ...] = (3, 6, 9)
    feature_inject_layers: tuple[int, ...] = (1, 4, 7)
    scale_schedule: tuple[int, ...] | None = None
    tau: float = 20.0
    feature_inject_residual: bool = True

    def __post_init__(self):
        if self.layers < 1 or self.queries < 1:
            raise ConfigError("need at least one layer and one query")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.tau <= 0:
            raise ConfigError("classifier temperature must be positive")
        self.query_inject_layers = tuple(sorted(set(self.query_inject_layers)))
        self.feature_inject_layers = tuple(sorted(set(self.feature_inject_layers)))
        for name, layers in (("query", self.query_inject_layers),
                             ("feature", self.feature_inject_layers)):
            bad = [l for l in layers if not 1 <= l <= self.layers]
            if bad:
                raise ConfigError(f"{name}-inject layers {bad} outside [1, {self.layers}]")
        if self.scale_schedule is None:
            self.scale_schedule = round_robin_schedule(self.layers)
        else:
            self.scale_schedule = tuple(self.scale_schedule)
        if len(self.scale_schedule) != self.layers:
            raise ConfigError(
                f"schedule length {len(self.scale_schedule)} != layers {self.layers}")
        if any(s not in (8, 16, 32) for s in self.scale_schedule):
            raise ConfigError(f"schedule scales must be in (8, 16, 32): {self.scale_schedule}")


@dataclass
class LayerNormParams:
    gain: Parameter
    bias: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.gain, self.bias]


def _layer_norm_params(dim: int) -> LayerNormParams:
    return LayerNormParams(Parameter(np.ones((1, dim))), Parameter(np.zeros((1, dim))))


@dataclass
class DecoderLayerParams:
    cross_attn: inj.AttentionParams
    cross_norm: LayerNormParams
    self_attn: inj.AttentionParams
    self_norm: LayerNormParams
    ffn_in: LinearParams
    ffn_out: LinearParams
    ffn_norm: LayerNormParams


@dataclass
class DecoderParams:
    queries: Parameter                       # (N, D) learnable query embeddings
    scale_proj: dict[int, LinearParams]      # semantic channels -> D, per scale
    sam_proj: LinearParams                   # localization channels -> D
    mask_feature_proj: LinearParams          # semantic 1/8 channels -> D
    layers: list[DecoderLayerParams]
    mask_mlp: tuple[LinearParams, LinearParams, LinearParams]
    out_norm: LayerNormParams
    class_proj: LinearParams                 # D -> bank dim
    no_object: Parameter                     # (1, 1) scalar logit
    query_spatial_proj: LinearParams         # localization channels -> D (query injector)
    feature_attn: inj.AttentionParams        # feature injector MHCA

    def named_parameters(self) -> dict[str, Parameter]:
        named: dict[str, Parameter] = {"queries": self.queries,
                                       "no_object": self.no_object}

        def put_linear(prefix: str, lp: LinearParams):
            named[f"{prefix}.weight"] = lp.weight
            named[f"{prefix}.bias"] = lp.bias

        def put_attn(prefix: str, ap: inj.AttentionParams):
            put_linear(f"{prefix}.q", ap.query)
            put_linear(f"{prefix}.k", ap.key)
            put_linear(f"{prefix}.v", ap.value)
            put_linear(f"{prefix}.out", ap.out)

        def put_norm(prefix: str, ln: LayerNormParams):
            named[f"{prefix}.gain"] = ln.gain
            named[f"{prefix}.bias"] = ln.bias

        for s in sorted(self.scale_proj):
            put_linear(f"scale_proj.{s}", self.scale_proj[s])
        put_linear("sam_proj", self.sam_proj)
        put_linear("mask_feature_proj", self.mask_feature_proj)
        for i, layer in enumerate(self.layers, start=1):
            put_attn(f"layer{i}.cross", layer.cross_attn)
            put_norm(f"layer{i}.cross_norm", layer.cross_norm)
            put_attn(f"layer{i}.self", layer.self_attn)
            put_norm(f"layer{i}.self_norm", layer.self_norm)
            put_linear(f"layer{i}.ffn_in", layer.ffn_in)
            put_linear(f"layer{i}.ffn_out", layer.ffn_out)
            put_norm(f"layer{i}.ffn_norm", layer.ffn_norm)
        for i, lp in enumerate(self.mask_mlp):
            put_linear(f"mask_mlp.{i}", lp)
        put_norm("out_norm", self.out_norm)
        put_linear("class_proj", self.class_proj)
        put_linear("query_spatial_proj", self.query_spatial_proj)
        put_attn("feature_attn", self.feature_attn)
        return named

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())


def init_decoder_params(cfg: DecoderConfig, clip_channels: int, sam_channels: int,
                        bank_dim: int, seed: int = 0) -> DecoderParams:
    rng = np.random.default_rng(seed)
    d = cfg.dim

    def attn() -> inj.AttentionParams:
        return inj.attention_params(rng, d, cfg.heads)

    layers = [
        DecoderLayerParams(
            cross_attn=attn(), cross_norm=_layer_norm_params(d),
            self_attn=attn(), self_norm=_layer_norm_params(d),
            ffn_in=ad.linear_params(rng, d, 2 * d),
            ffn_out=ad.linear_params(rng, 2 * d, d),
            ffn_norm=_layer_norm_params(d),
        )
        for _ in range(cfg.layers)
    ]
    return DecoderParams(
        queries=Parameter(rng.normal(0.0, 0.02, size=(cfg.queries, d))),
        scale_proj={s: ad.linear_params(rng, clip_channels, d)
                    for s in sorted(set(cfg.scale_schedule))},
        sam_proj=ad.linear_params(rng, sam_channels, d),
        mask_feature_proj=ad.linear_params(rng, clip_channels, d),
        layers=layers,
        mask_mlp=(ad.linear_params(rng, d, d), ad.linear_params(rng, d, d),
                  ad.linear_params(rng, d, d)),
        out_norm=_layer_norm_params(d),
        class_proj=ad.linear_params(rng, d, bank_dim),
        no_object=Parameter(np.zeros((1, 1))),
        query_spatial_proj=ad.linear_params(rng, sam_channels, d),
        feature_attn=attn(),
    )


def sinusoidal_positions(height: int, width: int, dim: int) -> np.ndarray:
    """Fixed 2-D sine/cosine position codes, flattened to (H*W, dim)."""
    if dim % 2:
        raise ConfigError(f"positional dim must be even, got {dim}")
    half = dim // 2
    n_pairs = (half + 1) // 2
    freqs = 10000.0 ** (-np.arange(n_pairs) / max(n_pairs, 1))
    ys = (np.arange(height) + 0.5) / height * 2 * np.pi
    xs = (np.arange(width) + 0.5) / width * 2 * np.pi

    def axis_code(coords: np.ndarray) -> np.ndarray:
        ang = coords[:, None] * freqs[None, :]
        code = np.empty((len(coords), 2 * n_pairs))
        code[:, 0::2] = np.sin(ang)
        code[:, 1::2] = np.cos(ang)
        return code[:, :half]

    ycode = axis_code(ys)  # (H, half)
    xcode = axis_code(xs)  # (W, half)
    out = np.empty((height, width, dim))
    out[:, :, :half] = ycode[:, None, :]
    out[:, :, half:] = xcode[None, :, :]
    return out.reshape(height * width, dim)


@dataclass
class LayerOutput:
    class_probs: Tensor   # (N, C+1), rows sum to 1, last column = no-object
    mask_logits: Tensor   # (N, h*w) at the mask-head scale
    mask_hw: tuple[int, int]


@dataclass
class DecoderOutput:
    layers: list[LayerOutput]
    final_queries: Tensor
    attention: np.ndarray | None = None          # final-layer cross-attn weights (N, T)
    attention_hw: tuple[int, int] | None = None


def classify_queries(queries, bank: TextEmbeddingBank, tau: float,
                     proj: LinearParams, no_object: Parameter) -> Tensor:
    """Softmax over tau-scaled cosine to each class embedding plus the
    no-object logit (last column)."""
    q = queries if isinstance(queries, Tensor) else ad.constant(queries)
    emb = bank.embeddings / np.linalg.norm(bank.embeddings, axis=1, keepdims=True)
    projected = ad.l2_normalize_rows(ad.linear(q, proj))
    logits = ad.scale(ad.matmul(projected, ad.constant(emb.T)), tau)
    ones = ad.constant(np.ones((q.shape[0], 1)))
    full = ad.concat_cols(logits, ad.matmul(ones, no_object))
    return ad.softmax_rows(full)


def clip_classify_masks(mask_logits: np.ndarray, clip_full: FeatureGrid,
                        bank: TextEmbeddingBank, tau: float) -> np.ndarray:
    """Class probabilities from mask-pooled semantic features.

    Returns (N, C+1); the no-object column is fixed at zero probability since
    this branch has no notion of "no object".
    """
    pooled = inj.mask_pool(mask_logits, clip_full)
    norms = np.maximum(np.linalg.norm(pooled, axis=1, keepdims=True), 1e-12)
    emb = bank.embeddings / np.linalg.norm(bank.embeddings, axis=1, keepdims=True)
    cos = (pooled / norms) @ emb.T
    z = tau * cos
    e = np.exp(z - z.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    return np.concatenate([probs, np.zeros((probs.shape[0], 1))], axis=1)


def _prediction_heads(queries: Tensor, mask_features: Tensor, bank, cfg, params):
    h = ad.layer_norm_rows(queries, params.out_norm.gain, params.out_norm.bias)
    x = ad.relu(ad.linear(h, params.mask_mlp[0]))
    x = ad.relu(ad.linear(x, params.mask_mlp[1]))
    mask_embed = ad.linear(x, params.mask_mlp[2])
    mask_logits = ad.matmul(mask_embed, ad.transpose(mask_features))
    class_probs = classify_queries(h, bank, cfg.tau, params.class_proj, params.no_object)
    return class_probs, mask_logits


def _attention_mask(prev_logits: np.ndarray, src_hw: tuple[int, int],
                    dst_hw: tuple[int, int]) -> np.ndarray:
    """Foreground of the previous masks at the target scale; empty rows
    fall back to attending everywhere."""
    n = prev_logits.shape[0]
    planes = prev_logits.reshape(n, *src_hw)
    if src_hw != dst_hw:
        planes = inj.resize_stack(planes, dst_hw)
    allowed = (planes > inj.MASK_LOGIT_THRESHOLD).reshape(n, -1)
    empty = ~allowed.any(axis=1)
    allowed[empty] = True
    return allowed


def decoder_forward(queries, clip_pyramid: dict[int, FeatureGrid], sam: FeatureGrid,
                    bank: TextEmbeddingBank, cfg: DecoderConfig, params: DecoderParams,
                    collect_attention: bool = False) -> DecoderOutput:
    """Run the full decoder stack.

    `clip_pyramid` maps resolution denominators to grids and must contain
    every scheduled scale plus 8 (the mask-head scale). `sam` is consumed only
    by the configured injectors.
    """
    for s in set(cfg.scale_schedule) | {8}:
        if s not in clip_pyramid:
            raise ConfigError(f"clip pyramid missing required scale 1/{s}")
    q = queries if isinstance(queries, Tensor) else ad.constant(queries)
    if q.shape != (cfg.queries, cfg.dim):
        raise ConfigError(f"queries shape {q.shape} != ({cfg.queries}, {cfg.dim})")

    tokens: dict[int, Tensor] = {}
    pos: dict[int, np.ndarray] = {}
    hw: dict[int, tuple[int, int]] = {}
    for s in set(cfg.scale_schedule):
        if s not in params.scale_proj:
            raise ConfigError(f"parameters were built without a 1/{s} projection")
        grid = clip_pyramid[s]
        hw[s] = (grid.height, grid.width)
        tokens[s] = ad.linear(ad.constant(grid.tokens()), params.scale_proj[s])
        pos[s] = sinusoidal_positions(grid.height, grid.width, cfg.dim)

    # Feature injector: enrich a scale's tokens with localization tokens.
    injected: dict[int, Tensor] = {}
    if cfg.feature_inject_layers:
        for s in {cfg.scale_schedule[l - 1] for l in cfg.feature_inject_layers}:
            sam_resized = inj.resize_grid(sam, hw[s], s)
            sam_tokens = ad.linear(ad.constant(sam_resized.tokens()), params.sam_proj)
            injected[s] = inj.feature_inject(tokens[s], sam_tokens, params.feature_attn,
                                             residual=cfg.feature_inject_residual)

    # Localization features at the mask-head scale, raw channels, for pooling.
    sam_at_mask_scale = None
    if cfg.query_inject_layers:
        grid8 = clip_pyramid[8]
        sam_at_mask_scale = inj.resize_grid(sam, (grid8.height, grid8.width), 8).data

    grid8 = clip_pyramid[8]
    mask_hw = (grid8.height, grid8.width)
    mask_features = ad.linear(ad.constant(grid8.tokens()), params.mask_feature_proj)

    # Initial heads on the raw queries seed the first layer's attention mask.
    _, mask0 = _prediction_heads(q, mask_features, bank, cfg, params)
    prev_logits = mask0.value

    outputs: list[LayerOutput] = []
    attention = None
    attention_hw = None
    for l, layer in enumerate(params.layers[:cfg.layers], start=1):
        s = cfg.scale_schedule[l - 1]
        attn_mask = _attention_mask(prev_logits, mask_hw, hw[s])

        if l in cfg.query_inject_layers:
            q = inj.query_inject(q, prev_logits.reshape(-1, *mask_hw),
                                 sam_at_mask_scale, params.query_spatial_proj)

        toks = injected.get(s) if l in cfg.feature_inject_layers else None
        toks = toks if toks is not None else tokens[s]
        keys = ad.add(toks, ad.constant(pos[s]))

        normed = ad.layer_norm_rows(q, layer.cross_norm.gain, layer.cross_norm.bias)
        want_weights = collect_attention and l == cfg.layers
        attended = inj.multi_head_attention(normed, keys, toks, layer.cross_attn,
                                            mask=attn_mask, return_weights=want_weights)
        if want_weights:
            attended, attention = attended
            attention_hw = hw[s]
        q = ad.add(q, attended)

        normed = ad.layer_norm_rows(q, layer.self_norm.gain, layer.self_norm.bias)
        q = ad.add(q, inj.multi_head_attention(normed, normed, normed, layer.self_attn))

        normed = ad.layer_norm_rows(q, layer.ffn_norm.gain, layer.ffn_norm.bias)
        q = ad.add(q, ad.linear(ad.relu(ad.linear(normed, layer.ffn_in)), layer.ffn_out))

        class_probs, mask_logits = _prediction_heads(q, mask_features, bank, cfg, params)
        outputs.append(LayerOutput(class_probs, mask_logits, mask_hw))
        prev_logits = mask_logits.value

    return DecoderOutput(outputs, q, attention, attention_hw)


# -- FZCK checkpoints ----------------------------------------------------------

def save_checkpoint(path, params: DecoderParams) -> None:
    named = params.named_parameters()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(named))]
    for name, p in named.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", p.value.ndim))
        parts.append(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        parts.append(p.value.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    if len(raw) < 12:
        raise FormatError("truncated header", len(raw))
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(raw) < offset + 4:
            raise FormatError("truncated name length", offset)
        (n,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        if len(raw) < offset + n:
            raise FormatError("truncated name bytes", offset)
        name = raw[offset:offset + n].decode("utf-8")
        offset += n
        if len(raw) < offset + 4:
            raise FormatError("truncated rank", offset)
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        if len(raw) < offset + 4 * rank:
            raise FormatError("truncated dims", offset)
        dims = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        nbytes = int(np.prod(dims)) * 8 if rank else 8
        if len(raw) < offset + nbytes:
            raise FormatError(f"truncated payload for tensor {name!r}", offset)
        tensors[name] = np.frombuffer(raw, dtype="<f8", offset=offset,
                                      count=nbytes // 8).reshape(dims).copy()
        offset += nbytes
    return tensors


def apply_checkpoint(params: DecoderParams, tensors: dict[str, np.ndarray]) -> None:
    named = params.named_parameters()
    missing = set(named) - set(tensors)
    extra = set(tensors) - set(named)
    if missing or extra:
        raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)[:3]}, "
                          f"unexpected {sorted(extra)[:3]}")
    for name, p in named.items():
        if tensors[name].shape != p.value.shape:
            raise ConfigError(f"tensor {name!r} shape {tensors[name].shape} "
                              f"!= expected {p.value.shape}")
        p.value = tensors[name].astype(np.float64)
        p.grad = np.zeros_like(p.value)
