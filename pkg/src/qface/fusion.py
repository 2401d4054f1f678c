"""Multi-stage feature fusion.

The three tapped encoder maps are concatenated along the token axis; the
encoder's fixed position table is tiled across the three stages, a learnable
per-stage embedding is added uniformly to each stage's tokens, and one
standard transformer block mixes the result. The same additive code (tiled
positions + stage embeddings) doubles as the key-position table for the
decoder's cross-attention.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import INIT_STD, _init_block, transformer_block
from .rng import RngStream

N_STAGES = 3
SE_INIT_STD = 0.02


def init_fusion_params(dim: int, mlp_ratio: float, rng: RngStream) -> dict:
    params: dict = {}
    params["mff.se"] = Tensor(rng.normal((N_STAGES, dim), SE_INIT_STD), requires_grad=True)
    _init_block(params, "mff.block", dim, mlp_ratio, rng)
    return params


def _stage_code(se: Tensor, pe: np.ndarray) -> Tensor:
    """(3T, d) additive code: position row p of stage k gets PE[p] + SE_k."""
    T = pe.shape[0]
    pieces = []
    for k in range(N_STAGES):
        pieces.append(Tensor(pe) + se[k : k + 1])
    return ad.concat(pieces, axis=0)


def fuse(stage_maps, params: dict, pe: np.ndarray, heads: int):
    """Concatenate three (B, T, d) maps, add PE+SE, apply one block.

    Returns the fused (B, 3T, d) feature map.
    """
    if len(stage_maps) != N_STAGES:
        raise ValueError(f"fuse expects {N_STAGES} stage maps, got {len(stage_maps)}")
    shapes = {tuple(m.shape) for m in stage_maps}
    if len(shapes) != 1:
        raise ValueError(f"fuse: stage maps disagree in shape: {sorted(shapes)}")
    T = stage_maps[0].shape[1]
    if pe.shape[0] != T:
        raise ValueError(f"fuse: position table has {pe.shape[0]} rows, maps have {T} tokens")
    x = ad.concat(list(stage_maps), axis=1)
    x = x + ad.expand_dims(_stage_code(params["mff.se"], pe), 0)
    out, _ = transformer_block(x, params, "mff.block", heads)
    return out


def fused_key_positions(params: dict, pe: np.ndarray) -> Tensor:
    """(3T, d) additive key-position code used by decoder cross-attention."""
    return _stage_code(params["mff.se"], pe)
