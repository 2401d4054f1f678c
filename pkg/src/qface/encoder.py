"""ViT-style shared encoder.

Patchify, linearly embed, add a fixed sine-cosine position table, prepend a
learnable [CLS] token, then run pre-norm transformer blocks. `encode`
returns the intermediate token maps of the configured fusion layers so the
fusion module can mix depths.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import RngStream

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 16
    hidden_dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.2
    fusion_layers: tuple = (2, 4, 6)

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.hidden_dim % self.heads != 0:
            raise ValueError(f"heads {self.heads} must divide hidden_dim {self.hidden_dim}")
        if self.hidden_dim % 2 != 0:
            raise ValueError("hidden_dim must be even for the sin-cos position table")
        fl = tuple(self.fusion_layers)
        if len(fl) != 3 or any(not (1 <= l <= self.depth) for l in fl) or list(fl) != sorted(set(fl)):
            raise ValueError(
                f"fusion_layers {fl} must be three strictly increasing indices in 1..{self.depth}"
            )
        object.__setattr__(self, "fusion_layers", fl)
        if not (0.0 <= self.drop_path_rate < 1.0):
            raise ValueError("drop_path_rate must be in [0, 1)")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


# 12-layer config matching the published full-scale setup; width follows the
# decoder/query embedding size (1024).
PAPER_ENCODER = EncoderConfig(
    image_size=224, patch_size=16, hidden_dim=1024, depth=12, heads=16,
    mlp_ratio=4.0, drop_path_rate=0.2, fusion_layers=(4, 8, 12),
)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) -> (B, N, ps*ps*C) flattened patches in raster order."""
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    B, H, W, C = images.shape
    if H != W:
        raise ValueError(f"images must be square, got {H}x{W}")
    if H % patch_size != 0:
        raise ValueError(f"image size {H} not divisible by patch size {patch_size}")
    g = H // patch_size
    x = images.reshape(B, g, patch_size, g, patch_size, C)
    x = x.transpose(0, 1, 3, 2, 4, 5).reshape(B, g * g, patch_size * patch_size * C)
    return x[0] if single else x


_PE_CACHE: dict = {}


def sincos_position_embedding(n_tokens: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed interleaved sin/cos table; the [CLS] row (index 0) is zero."""
    if dim % 2 != 0:
        raise ValueError(f"position embedding needs even dim, got {dim}")
    key = (n_tokens, dim, np.dtype(dtype).name)
    cached = _PE_CACHE.get(key)
    if cached is not None:
        return cached
    pe = np.zeros((n_tokens, dim), dtype=np.float64)
    pos = np.arange(n_tokens - 1, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    denom = np.power(10000.0, 2.0 * i / dim)
    pe[1:, 0::2] = np.sin(pos / denom)
    pe[1:, 1::2] = np.cos(pos / denom)
    pe = pe.astype(dtype)
    pe.setflags(write=False)
    _PE_CACHE[key] = pe
    return pe


def _init_block(params: dict, prefix: str, dim: int, mlp_ratio: float, rng: RngStream):
    hidden = int(dim * mlp_ratio)
    params[f"{prefix}.ln1.g"] = Tensor(np.ones(dim, np.float32), requires_grad=True)
    params[f"{prefix}.ln1.b"] = Tensor(np.zeros(dim, np.float32), requires_grad=True)
    for nm in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.attn.{nm}"] = Tensor(rng.normal((dim, dim), INIT_STD), requires_grad=True)
    for nm in ("bq", "bk", "bv", "bo"):
        params[f"{prefix}.attn.{nm}"] = Tensor(np.zeros(dim, np.float32), requires_grad=True)
    params[f"{prefix}.ln2.g"] = Tensor(np.ones(dim, np.float32), requires_grad=True)
    params[f"{prefix}.ln2.b"] = Tensor(np.zeros(dim, np.float32), requires_grad=True)
    params[f"{prefix}.mlp.w1"] = Tensor(rng.normal((dim, hidden), INIT_STD), requires_grad=True)
    params[f"{prefix}.mlp.b1"] = Tensor(np.zeros(hidden, np.float32), requires_grad=True)
    params[f"{prefix}.mlp.w2"] = Tensor(rng.normal((hidden, dim), INIT_STD), requires_grad=True)
    params[f"{prefix}.mlp.b2"] = Tensor(np.zeros(dim, np.float32), requires_grad=True)


def init_encoder_params(cfg: EncoderConfig, rng: RngStream) -> dict:
    d = cfg.hidden_dim
    params: dict = {}
    params["encoder.patch.w"] = Tensor(rng.normal((cfg.patch_dim, d), INIT_STD), requires_grad=True)
    params["encoder.patch.b"] = Tensor(np.zeros(d, np.float32), requires_grad=True)
    params["encoder.cls"] = Tensor(np.zeros((1, d), np.float32), requires_grad=True)
    for layer in range(1, cfg.depth + 1):
        _init_block(params, f"encoder.block{layer}", d, cfg.mlp_ratio, rng)
    return params


def multi_head_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, params: dict,
                         prefix: str, heads: int, want_probs: bool = False):
    """Standard scaled dot-product attention over (B, T, d) streams.

    Returns (output, probs) where probs is the head-averaged attention as a
    plain array, or None unless requested.
    """
    d = q_in.shape[-1]
    if d % heads != 0:
        raise ValueError(f"heads {heads} must divide model dim {d}")
    dh = d // heads
    B, Tq = q_in.shape[0], q_in.shape[1]
    Tk = k_in.shape[1]

    q = ad.linear(q_in, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = ad.linear(k_in, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = ad.linear(v_in, params[f"{prefix}.wv"], params[f"{prefix}.bv"])

    q = ad.transpose(ad.reshape(q, (B, Tq, heads, dh)), (0, 2, 1, 3))
    k = ad.transpose(ad.reshape(k, (B, Tk, heads, dh)), (0, 2, 1, 3))
    v = ad.transpose(ad.reshape(v, (B, Tk, heads, dh)), (0, 2, 1, 3))

    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    probs = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(probs, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, Tq, d))
    out = ad.linear(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    avg_probs = probs.data.mean(axis=1) if want_probs else None
    return out, avg_probs


def _ffn(x: Tensor, params: dict, prefix: str) -> Tensor:
    h = ad.gelu(ad.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return ad.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def transformer_block(tokens: Tensor, params: dict, prefix: str, heads: int,
                      keep_scale: float = 1.0, want_probs: bool = False):
    """Pre-norm residual block: x + attn(ln(x)), then x + ffn(ln(x)).

    keep_scale implements stochastic depth: 0 skips both residual branches,
    otherwise the branch output is scaled by 1/keep_prob.
    """
    if keep_scale == 0.0:
        return tokens, None
    normed = ad.layer_norm(tokens, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    attn_out, probs = multi_head_attention(normed, normed, normed, params,
                                           f"{prefix}.attn", heads, want_probs)
    if keep_scale != 1.0:
        attn_out = attn_out * keep_scale
    tokens = tokens + attn_out
    normed2 = ad.layer_norm(tokens, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    ffn_out = _ffn(normed2, params, f"{prefix}.mlp")
    if keep_scale != 1.0:
        ffn_out = ffn_out * keep_scale
    return tokens + ffn_out, probs


def embed_tokens(patches: np.ndarray, params: dict, pe: np.ndarray,
                 patch_positions: np.ndarray | None = None) -> Tensor:
    """Linear patch embedding + position rows + [CLS] at index 0.

    `patch_positions` selects which position-table rows the patches use
    (defaults to all patches in order); MIM passes the visible subset.
    """
    if "encoder.patch.w" not in params:
        raise ValueError("encoder parameters not initialized (missing encoder.patch.w)")
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    B, N, _ = patches.shape
    if patch_positions is None:
        patch_positions = np.arange(N)
    x = ad.linear(Tensor(patches.astype(params["encoder.patch.w"].dtype.type)),
                  params["encoder.patch.w"], params["encoder.patch.b"])
    x = x + Tensor(pe[1 + patch_positions])
    cls = params["encoder.cls"] + Tensor(pe[0:1])
    cls = ad.broadcast_to(ad.expand_dims(cls, 0), (B, 1, x.shape[-1]))
    return ad.concat([cls, x], axis=1)


def encode(images: np.ndarray, cfg: EncoderConfig, params: dict,
           train: bool = False, drop_rng: RngStream | None = None,
           taps: tuple | None = None) -> dict:
    """Run the full encoder; returns {layer_index: (B, T, d) tokens} for the
    requested tap layers (defaults to cfg.fusion_layers).

    Stochastic depth applies only when train=True and the configured rate
    is positive; eval-mode calls are deterministic.
    """
    from .optim import drop_path_mask

    patches = patchify(images, cfg.patch_size)
    pe = sincos_position_embedding(cfg.n_tokens, cfg.hidden_dim)
    tokens = embed_tokens(patches, params, pe)
    if train and cfg.drop_path_rate > 0.0:
        _, scales = drop_path_mask(cfg.drop_path_rate, cfg.depth, drop_rng)
    else:
        scales = np.ones(cfg.depth)
    wanted = cfg.fusion_layers if taps is None else tuple(taps)
    out: dict = {}
    for layer in range(1, cfg.depth + 1):
        tokens, _ = transformer_block(tokens, params, f"encoder.block{layer}",
                                      cfg.heads, keep_scale=float(scales[layer - 1]))
        if layer in wanted:
            out[layer] = tokens
    return out
