"""Query-driven decoder.

A single learnable query table covers every task's labels; two decoder
blocks (query self-attention, cross-attention into the fused feature map,
FFN, all pre-norm residual) refine the queries, and an independent affine
row per query maps its feature to one logit. The first block's
cross-attention weights are exportable as per-stage heatmaps.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import INIT_STD, multi_head_attention
from .pgm import write_pgm
from .rng import RngStream

DECODER_DEPTH = 2


@dataclass(frozen=True)
class QuerySet:
    """Global query table partitioned into contiguous per-task slices."""

    n_queries: int
    task_slices: dict  # task name -> (start, stop)

    def __post_init__(self):
        spans = sorted(self.task_slices.values())
        cursor = 0
        for start, stop in spans:
            if start != cursor or stop <= start:
                raise ValueError(f"query slices must tile [0, n) contiguously, got {spans}")
            cursor = stop
        if cursor != self.n_queries:
            raise ValueError(f"query slices cover {cursor}, expected {self.n_queries}")

    @classmethod
    def for_tasks(cls, tasks) -> "QuerySet":
        slices = {}
        cursor = 0
        for t in tasks:
            slices[t.name] = (cursor, cursor + t.label_count)
            cursor += t.label_count
        return cls(n_queries=cursor, task_slices=slices)


def init_query_params(n_queries: int, dim: int, rng: RngStream) -> dict:
    return {
        "decoder.q": Tensor(rng.normal((n_queries, dim), INIT_STD), requires_grad=True),
        "decoder.q_pos": Tensor(rng.normal((n_queries, dim), INIT_STD), requires_grad=True),
    }


def init_decoder_params(dim: int, mlp_ratio: float, rng: RngStream) -> dict:
    params: dict = {}
    for i in range(1, DECODER_DEPTH + 1):
        prefix = f"decoder.block{i}"
        for ln in ("ln_q", "ln_c", "ln_f"):
            params[f"{prefix}.{ln}.g"] = Tensor(np.ones(dim, np.float32), requires_grad=True)
            params[f"{prefix}.{ln}.b"] = Tensor(np.zeros(dim, np.float32), requires_grad=True)
        for sub in ("self", "cross"):
            for nm in ("wq", "wk", "wv", "wo"):
                params[f"{prefix}.{sub}.{nm}"] = Tensor(rng.normal((dim, dim), INIT_STD),
                                                        requires_grad=True)
            for nm in ("bq", "bk", "bv", "bo"):
                params[f"{prefix}.{sub}.{nm}"] = Tensor(np.zeros(dim, np.float32),
                                                        requires_grad=True)
        hidden = int(dim * mlp_ratio)
        params[f"{prefix}.mlp.w1"] = Tensor(rng.normal((dim, hidden), INIT_STD), requires_grad=True)
        params[f"{prefix}.mlp.b1"] = Tensor(np.zeros(hidden, np.float32), requires_grad=True)
        params[f"{prefix}.mlp.w2"] = Tensor(rng.normal((hidden, dim), INIT_STD), requires_grad=True)
        params[f"{prefix}.mlp.b2"] = Tensor(np.zeros(dim, np.float32), requires_grad=True)
    return params


def init_projection_params(n_queries: int, dim: int, rng: RngStream) -> dict:
    """One independent (d+1)-parameter affine row per label."""
    return {
        "heads.w": Tensor(rng.normal((n_queries, dim), INIT_STD), requires_grad=True),
        "heads.b": Tensor(np.zeros(n_queries, np.float32), requires_grad=True),
    }


@dataclass
class AttentionRecord:
    """Head-averaged cross-attention of one decoder block, (N_q, n_keys)."""

    block_index: int
    weights: np.ndarray
    tokens_per_stage: int
    n_stages: int
    grid: tuple  # (gh, gw) patch grid of one stage

    def stage_slices(self):
        T = self.tokens_per_stage
        return [(k * T, (k + 1) * T) for k in range(self.n_stages)]

    def stage_marginals(self) -> np.ndarray:
        """(N_q, n_stages) sums of attention mass per stage."""
        return np.stack([self.weights[:, s:e].sum(axis=1) for s, e in self.stage_slices()], axis=1)

    def cls_weights(self) -> np.ndarray:
        """(N_q, n_stages) attention on each stage's [CLS] column."""
        return np.stack([self.weights[:, s] for s, _ in self.stage_slices()], axis=1)

    def spatial_maps(self) -> np.ndarray:
        """(N_q, n_stages, gh, gw) patch-grid attention maps (CLS excluded)."""
        gh, gw = self.grid
        maps = []
        for s, e in self.stage_slices():
            maps.append(self.weights[:, s + 1 : e].reshape(-1, gh, gw))
        return np.stack(maps, axis=1)


def decoder_block(q_in: Tensor, fstar: Tensor, key_pos: Tensor, q_pos: Tensor,
                  params: dict, prefix: str, heads: int,
                  record: bool = False):
    """One decoder block: query self-attention, cross-attention, FFN.

    Queries and keys carry additive position codes (q_pos for queries,
    key_pos for the fused map); values are the unmodified streams. Residual
    connections wrap each sublayer, with layer norm on the query path.
    """
    B = q_in.shape[0]
    qp = ad.expand_dims(q_pos, 0)

    u = ad.layer_norm(q_in, params[f"{prefix}.ln_q.g"], params[f"{prefix}.ln_q.b"])
    self_out, _ = multi_head_attention(u + qp, u + qp, u, params, f"{prefix}.self", heads)
    q1 = q_in + self_out

    u = ad.layer_norm(q1, params[f"{prefix}.ln_c.g"], params[f"{prefix}.ln_c.b"])
    keys = fstar + ad.expand_dims(key_pos, 0)
    cross_out, probs = multi_head_attention(u + qp, keys, fstar, params,
                                            f"{prefix}.cross", heads, want_probs=record)
    q2 = q1 + cross_out

    u = ad.layer_norm(q2, params[f"{prefix}.ln_f.g"], params[f"{prefix}.ln_f.b"])
    h = ad.gelu(ad.linear(u, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"]))
    ffn_out = ad.linear(h, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])
    return q2 + ffn_out, probs


def decode(params: dict, fstar: Tensor, key_pos: Tensor, heads: int,
           tokens_per_stage: int, n_stages: int, grid: tuple,
           record: bool = False):
    """Apply exactly DECODER_DEPTH blocks; returns per-query features plus
    one AttentionRecord per block (empty list unless record=True)."""
    B = fstar.shape[0]
    n_q, dim = params["decoder.q"].shape
    q = ad.broadcast_to(ad.expand_dims(params["decoder.q"], 0), (B, n_q, dim))
    records = []
    for i in range(1, DECODER_DEPTH + 1):
        q, probs = decoder_block(q, fstar, key_pos, params["decoder.q_pos"], params,
                                 f"decoder.block{i}", heads, record=record)
        if record:
            records.append(AttentionRecord(
                block_index=i, weights=probs.mean(axis=0),
                tokens_per_stage=tokens_per_stage, n_stages=n_stages, grid=grid,
            ))
    return q, records


def project_logits(features: Tensor, params: dict) -> Tensor:
    """Per-query affine readout: z[b, i] = w_i . feat[b, i] + b_i."""
    w = params["heads.w"]
    b = params["heads.b"]
    return ad.sum_(features * ad.expand_dims(w, 0), axis=-1) + ad.expand_dims(b, 0)


def export_attention(records, labels, out_dir):
    """Write one PGM per (block, query, stage) plus marginal CSVs.

    Pixels are round(255 * weight / max weight) within each map; per-stage
    marginals (including the CLS mass) go to attn_marginals.csv for block 1,
    and the CLS column itself to attn_cls.csv.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for rec in records:
        maps = rec.spatial_maps()
        for qi, label in enumerate(labels):
            for stage in range(rec.n_stages):
                m = maps[qi, stage]
                peak = float(m.max())
                img = np.zeros(m.shape, dtype=np.uint8) if peak <= 0 else \
                    np.round(255.0 * m / peak).astype(np.uint8)
                write_pgm(out_dir / f"attn_b{rec.block_index}_q{label}_s{stage + 1}.pgm", img)

    first = records[0]
    marg = first.stage_marginals()
    with open(out_dir / "attn_marginals.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "stage", "weight"])
        for qi, label in enumerate(labels):
            for stage in range(first.n_stages):
                w.writerow([label, stage + 1, repr(float(marg[qi, stage]))])
    cls_w = first.cls_weights()
    with open(out_dir / "attn_cls.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "stage", "cls_weight"])
        for qi, label in enumerate(labels):
            for stage in range(first.n_stages):
                w.writerow([label, stage + 1, repr(float(cls_w[qi, stage]))])
