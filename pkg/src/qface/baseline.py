"""Conventional multi-head comparison model.

Same shared encoder as QFace; the decoder is replaced by global mean
pooling of the final layer's patch tokens feeding one independent linear
head per task. Head outputs are concatenated in task order so the trainer
sees the identical flat logit interface.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import INIT_STD, encode, init_encoder_params
from .model import ModelConfig
from .rng import RngStream


class MultiHead:
    kind = "multihead"

    def __init__(self, cfg: ModelConfig, params: dict):
        self.cfg = cfg
        self.params = params
        self.slices = cfg.query_set.task_slices

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int) -> "MultiHead":
        rng = RngStream(seed, "init")
        params = init_encoder_params(cfg.encoder, rng)
        d = cfg.encoder.hidden_dim
        for spec in cfg.tasks:
            params[f"head.{spec.name}.w"] = Tensor(rng.normal((d, spec.label_count), INIT_STD),
                                                   requires_grad=True)
            params[f"head.{spec.name}.b"] = Tensor(np.zeros(spec.label_count, np.float32),
                                                   requires_grad=True)
        return cls(cfg, params)

    def forward(self, images: np.ndarray, train: bool = False,
                drop_rng: RngStream | None = None, record: bool = False):
        enc = self.cfg.encoder
        taps = encode(images, enc, self.params, train=train, drop_rng=drop_rng,
                      taps=(enc.depth,))
        final = taps[enc.depth]
        pooled = ad.mean(final[:, 1:, :], axis=1)  # patch tokens only, no [CLS]
        outs = [ad.linear(pooled, self.params[f"head.{t.name}.w"], self.params[f"head.{t.name}.b"])
                for t in self.cfg.tasks]
        z = ad.concat(outs, axis=-1)
        return z, []

    def task_logits(self, z, name: str):
        s, e = self.slices[name]
        return z[:, s:e]
