"""Full model assembly.

QFace wires the shared encoder, the multi-stage fusion block, the
query-driven decoder, and the per-label projection into one forward pass
producing a flat logit vector z of length n_queries; each task reads its
contiguous slice. The `use_mff=False` variant feeds the final encoder map
straight into the decoder (no concatenation, no stage embeddings, no fusion
block) and is the ablation's "without fusion" arm.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .decoder import (DECODER_DEPTH, QuerySet, decode, init_decoder_params,
                      init_projection_params, init_query_params, project_logits)
from .encoder import EncoderConfig, encode, init_encoder_params, sincos_position_embedding
from .fusion import N_STAGES, fuse, fused_key_positions, init_fusion_params
from .rng import RngStream
from .rotation import rot6d_to_matrix_np
from .tasks import AGE_OFFSET, AGE_SCALE, TaskSpec, desk_task_suite


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    tasks: tuple = field(default_factory=desk_task_suite)
    use_mff: bool = True
    decoder_heads: int = 4

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.encoder.hidden_dim % self.decoder_heads != 0:
            raise ValueError("decoder_heads must divide hidden_dim")
        QuerySet.for_tasks(self.tasks)  # validates slices

    @property
    def query_set(self) -> QuerySet:
        return QuerySet.for_tasks(self.tasks)

    @property
    def n_queries(self) -> int:
        return self.query_set.n_queries

    @property
    def fused_tokens(self) -> int:
        """Token count of the decoder's key/value stream."""
        n = self.encoder.n_tokens
        return N_STAGES * n if self.use_mff else n


def task_label_names(spec: TaskSpec) -> list:
    if spec.kind == "scalar_regression" and spec.label_count == 3:
        return ["age", "male", "female"]
    return [f"{spec.name}_{i}" for i in range(spec.label_count)]


def all_label_names(tasks) -> list:
    names: list = []
    for spec in tasks:
        names.extend(task_label_names(spec))
    return names


class QFace:
    kind = "qface"

    def __init__(self, cfg: ModelConfig, params: dict):
        self.cfg = cfg
        self.params = params
        self.slices = cfg.query_set.task_slices

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int) -> "QFace":
        rng = RngStream(seed, "init")
        params = init_encoder_params(cfg.encoder, rng)
        if cfg.use_mff:
            params.update(init_fusion_params(cfg.encoder.hidden_dim, cfg.encoder.mlp_ratio, rng))
        params.update(init_query_params(cfg.n_queries, cfg.encoder.hidden_dim, rng))
        params.update(init_decoder_params(cfg.encoder.hidden_dim, cfg.encoder.mlp_ratio, rng))
        params.update(init_projection_params(cfg.n_queries, cfg.encoder.hidden_dim, rng))
        return cls(cfg, params)

    def forward(self, images: np.ndarray, train: bool = False,
                drop_rng: RngStream | None = None, record: bool = False):
        cfg = self.cfg
        enc = cfg.encoder
        taps = encode(images, enc, self.params, train=train, drop_rng=drop_rng)
        stage_maps = [taps[l] for l in enc.fusion_layers]
        pe = sincos_position_embedding(enc.n_tokens, enc.hidden_dim)
        if cfg.use_mff:
            fstar = fuse(stage_maps, self.params, pe, enc.heads)
            key_pos = fused_key_positions(self.params, pe)
            n_stages = N_STAGES
        else:
            fstar = stage_maps[-1]
            key_pos = Tensor(pe)
            n_stages = 1
        feats, records = decode(self.params, fstar, key_pos, cfg.decoder_heads,
                                enc.n_tokens, n_stages, (enc.grid, enc.grid), record=record)
        z = project_logits(feats, self.params)
        return z, records

    def task_logits(self, z, name: str):
        s, e = self.slices[name]
        return z[:, s:e]


def predictions_from_logits(z: np.ndarray, tasks) -> dict:
    """Decode a (B, N_q) logit array into per-task numpy predictions."""
    out: dict = {}
    qs = QuerySet.for_tasks(tasks)
    for spec in tasks:
        s, e = qs.task_slices[spec.name]
        zt = z[:, s:e]
        if spec.kind == "single_label":
            out[spec.name] = {"class": np.argmax(zt, axis=-1), "logits": zt}
        elif spec.kind == "multi_label":
            out[spec.name] = {"bits": (zt > 0.0).astype(np.int64), "logits": zt}
        elif spec.kind == "scalar_regression":
            rec = {"age": AGE_OFFSET + AGE_SCALE * zt[:, 0]}
            if spec.label_count > 1:
                rec["gender"] = np.argmax(zt[:, 1:], axis=-1)
            out[spec.name] = rec
        elif spec.kind == "rotation":
            out[spec.name] = {"rotation": np.stack([rot6d_to_matrix_np(c) for c in zt])}
    return out


def count_params(params: dict) -> int:
    return int(sum(t.data.size for t in params.values()))


def cast_params(params: dict, dtype) -> None:
    """In-place dtype change; float64 graphs are used for gradient checks."""
    for t in params.values():
        t.data = t.data.astype(dtype)
        t.grad = None
