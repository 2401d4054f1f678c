"""Masked-image-modeling pretraining of the encoder.

A random subset of patches is hidden; the encoder sees only the visible
patches (plus [CLS]), a two-layer transformer decoder rebuilds the full
token sequence with a shared learnable mask token in the hidden slots, and
an L1 objective compares reconstructed pixel patches against the originals,
per-patch averaged and summed over the mask set.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .encoder import (EncoderConfig, INIT_STD, _init_block, embed_tokens, patchify,
                      sincos_position_embedding, transformer_block)
from .rng import RngStream

MIM_DECODER_DEPTH = 2
DEFAULT_MASK_RATIO = 0.75


@dataclass(frozen=True)
class MaskPlan:
    n_patches: int
    masked: np.ndarray   # ascending indices
    visible: np.ndarray  # ascending indices

    def __post_init__(self):
        m = set(self.masked.tolist())
        v = set(self.visible.tolist())
        if m & v:
            raise ValueError("mask plan: masked and visible sets overlap")
        if m | v != set(range(self.n_patches)):
            raise ValueError("mask plan: sets do not cover all patches")

    @property
    def n_masked(self) -> int:
        return len(self.masked)

    @property
    def n_visible(self) -> int:
        return len(self.visible)


def sample_mask(n_patches: int, mask_ratio: float, rng: RngStream) -> MaskPlan:
    """Uniform without-replacement mask of round(ratio * N) patches."""
    if not (0.0 <= mask_ratio < 1.0):
        raise ValueError(f"mask_ratio must be in [0, 1), got {mask_ratio}")
    n_masked = int(round(mask_ratio * n_patches))
    perm = rng.permutation(n_patches)
    masked = np.sort(perm[:n_masked])
    visible = np.sort(perm[n_masked:])
    return MaskPlan(n_patches=n_patches, masked=masked, visible=visible)


def init_mim_params(cfg: EncoderConfig, rng: RngStream) -> dict:
    d = cfg.hidden_dim
    params: dict = {}
    params["mim.mask_token"] = Tensor(rng.normal((1, d), INIT_STD), requires_grad=True)
    for i in range(1, MIM_DECODER_DEPTH + 1):
        _init_block(params, f"mim.block{i}", d, cfg.mlp_ratio, rng)
    params["mim.head.w"] = Tensor(rng.normal((d, cfg.patch_dim), INIT_STD), requires_grad=True)
    params["mim.head.b"] = Tensor(np.zeros(cfg.patch_dim, np.float32), requires_grad=True)
    return params


def mim_forward(images: np.ndarray, plan: MaskPlan, cfg: EncoderConfig, params: dict):
    """Returns (reconstructions (B, N_m, patch_dim), target patches)."""
    patches = patchify(images, cfg.patch_size)
    if patches.ndim == 2:
        patches = patches[None]
    B, N, P = patches.shape
    if N != plan.n_patches:
        raise ValueError(f"mask plan is for {plan.n_patches} patches, images have {N}")

    pe = sincos_position_embedding(cfg.n_tokens, cfg.hidden_dim)
    visible_patches = patches[:, plan.visible, :]
    tokens = embed_tokens(visible_patches, params, pe, patch_positions=plan.visible)
    for layer in range(1, cfg.depth + 1):
        tokens, _ = transformer_block(tokens, params, f"encoder.block{layer}", cfg.heads)

    # rebuild the full-length sequence: visible slots get encoder outputs,
    # masked slots the shared mask token; everything gets position rows again
    d = cfg.hidden_dim
    cls_tok = tokens[:, 0:1, :]
    vis_tok = tokens[:, 1:, :]
    scatter = np.zeros((N, plan.n_visible), dtype=np.float32)
    scatter[plan.visible, np.arange(plan.n_visible)] = 1.0
    placed = ad.matmul(Tensor(scatter), vis_tok)
    mask_flag = np.zeros((N, 1), dtype=np.float32)
    mask_flag[plan.masked] = 1.0
    placed = placed + Tensor(mask_flag) * params["mim.mask_token"]
    dec_in = ad.concat([cls_tok, placed], axis=1) + Tensor(pe)

    x = dec_in
    for i in range(1, MIM_DECODER_DEPTH + 1):
        x, _ = transformer_block(x, params, f"mim.block{i}", cfg.heads)
    pixels = ad.linear(x[:, 1:, :], params["mim.head.w"], params["mim.head.b"])

    if plan.n_masked == 0:
        empty = Tensor(np.zeros((B, 0, P), np.float32))
        return empty, np.zeros((B, 0, P), np.float32)
    select = np.zeros((plan.n_masked, N), dtype=np.float32)
    select[np.arange(plan.n_masked), plan.masked] = 1.0
    recon = ad.matmul(Tensor(select), pixels)
    targets = patches[:, plan.masked, :]
    return recon, targets


def mim_loss(reconstructions: Tensor, targets: np.ndarray) -> Tensor:
    """Per-patch mean absolute error, summed over masked patches, averaged
    over the batch."""
    targets = np.asarray(targets)
    if tuple(reconstructions.shape) != targets.shape:
        raise ValueError(
            f"mim_loss: reconstruction shape {tuple(reconstructions.shape)} does not match "
            f"targets {targets.shape}"
        )
    if targets.size == 0:
        return ad.sum_(reconstructions * Tensor(np.zeros_like(targets, dtype=np.float32)))
    per_patch = ad.mean(ad.abs_(reconstructions - Tensor(targets.astype(np.float32))), axis=-1)
    return ad.mean(ad.sum_(per_patch, axis=-1))


def masked_l1(images: np.ndarray, cfg: EncoderConfig, params: dict, plan: MaskPlan) -> float:
    recon, targets = mim_forward(images, plan, cfg, params)
    return float(mim_loss(recon, targets).data)


def heldout_masked_l1(dataset, cfg: EncoderConfig, params: dict, mask_ratio: float,
                      seed: int, batch_size: int = 64, max_images: int = 512) -> float:
    """Held-out reconstruction loss under masks regenerated from a fixed
    seed, so successive evaluations are comparable."""
    rng = RngStream(seed, "masking")
    n = min(len(dataset), max_images)
    total, batches = 0.0, 0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        plan = sample_mask(cfg.n_patches, mask_ratio, rng)
        total += masked_l1(dataset.batch_images(idx), cfg, params, plan)
        batches += 1
    return total / max(batches, 1)


def init_pretrain_params(cfg: EncoderConfig, seed: int) -> dict:
    from .encoder import init_encoder_params

    rng = RngStream(seed, "init")
    params = init_encoder_params(cfg, rng)
    params.update(init_mim_params(cfg, rng))
    return params


def pretrain(train_ds, cfg: EncoderConfig, sched, optim_cfg, steps: int,
             batch_size: int, mask_ratio: float, seed: int, out_dir,
             heldout_ds=None, params: dict | None = None) -> dict:
    """Masked-reconstruction pretraining loop.

    Writes pretrain_log.csv (step, loss, lr) and encoder.ckpt; stochastic
    depth is off here (it is a fine-tuning regularizer). Returns the params
    plus start/end held-out losses when a held-out split is given.
    """
    from .checkpoint import save_checkpoint
    from .optim import AdamW, lr_at

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if params is None:
        params = init_pretrain_params(cfg, seed)
    optim = AdamW(params, optim_cfg, cfg.depth, layer_decay=sched.layer_decay)
    data_rng = RngStream(seed, "data")
    mask_rng = RngStream(seed, "masking")

    initial_heldout = None
    if heldout_ds is not None:
        initial_heldout = heldout_masked_l1(heldout_ds, cfg, params, mask_ratio, seed)

    with open(out_dir / "pretrain_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr"])
        for step in range(steps):
            lr = lr_at(step, sched)
            idx = data_rng.integers(0, len(train_ds), (batch_size,))
            plan = sample_mask(cfg.n_patches, mask_ratio, mask_rng)
            recon, targets = mim_forward(train_ds.batch_images(idx), plan, cfg, params)
            loss = mim_loss(recon, targets)
            optim.zero_grad()
            backward(loss)
            optim.step(lr)
            writer.writerow([step, repr(float(loss.data)), repr(lr)])

    final_heldout = None
    if heldout_ds is not None:
        final_heldout = heldout_masked_l1(heldout_ds, cfg, params, mask_ratio, seed)

    ckpt = out_dir / "encoder.ckpt"
    save_checkpoint(ckpt, params, {
        "phase": "pretrain", "steps": steps, "mask_ratio": mask_ratio, "seed": seed,
    })
    return {
        "params": params,
        "ckpt": ckpt,
        "initial_heldout_l1": initial_heldout,
        "final_heldout_l1": final_heldout,
    }
