"""Task registry and loss functions.

Four task kinds share the logit vector: single-label classification
(cross-entropy), multi-label detection (binary cross-entropy), scalar
regression with an auxiliary class pair (smoothed L1 plus cross-entropy;
this is the age/gender task), and rotation regression (6D code, geodesic
loss). Regression label noise (Gaussian on ages, entrywise perturbation of
rotation targets) applies only under the training flag.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import RngStream
from .rotation import geodesic_loss, perturb_rotation, rot6d_to_matrix

KINDS = ("single_label", "multi_label", "scalar_regression", "rotation")

AGE_NOISE_STD = 1.0
ROTATION_NOISE_STD = 0.01
SMOOTH_L1_BETA = 1.0

# affine calibration of the age readout: predicted age = AGE_OFFSET + AGE_SCALE * logit
AGE_OFFSET = 50.0
AGE_SCALE = 50.0


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    label_count: int
    loss_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind '{self.kind}' (choose from {KINDS})")
        if self.label_count < 1:
            raise ValueError("label_count must be positive")
        if self.loss_weight <= 0:
            raise ValueError("loss_weight must be positive")
        if self.kind == "single_label" and self.label_count < 2:
            raise ValueError("single_label tasks need at least 2 classes")
        if self.kind == "rotation" and self.label_count != 6:
            raise ValueError("rotation tasks use the 6D code: label_count must be 6")


def desk_task_suite() -> tuple:
    """The synthetic five-task suite: 7+6+4+3+6 = 26 queries.

    The age branch regresses in raw 0..100 year units, so its smoothed-L1
    sits near 25 at init, ~25x every other task; its default weight rescales
    that contribution to parity so no single task owns the shared gradients.
    """
    return (
        TaskSpec("expression", "single_label", 7),
        TaskSpec("attributes", "multi_label", 6),
        TaskSpec("action_units", "multi_label", 4),
        TaskSpec("age_gender", "scalar_regression", 3, loss_weight=0.1),
        TaskSpec("pose", "rotation", 6),
    )


def paper_task_suite() -> tuple:
    """Full-scale label layout: 7+12+40+3+6 = 68 queries."""
    return (
        TaskSpec("expression", "single_label", 7),
        TaskSpec("action_units", "multi_label", 12),
        TaskSpec("attributes", "multi_label", 40),
        TaskSpec("age_gender", "scalar_regression", 3),
        TaskSpec("pose", "rotation", 6),
    )


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean -log softmax(logits)[label]; logits (K,) or (B, K)."""
    if logits.ndim == 1:
        logits = ad.expand_dims(logits, 0)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"ce_loss: {B} rows but {labels.shape} labels")
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"ce_loss: label out of range [0, {K})")
    onehot = np.zeros((B, K), dtype=logits.dtype.type)
    onehot[np.arange(B), labels] = 1.0
    picked = ad.sum_(ad.log_softmax(logits, axis=-1) * Tensor(onehot), axis=-1)
    return -ad.mean(picked)


def bce_loss(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean binary cross-entropy over unmasked labels, stable in logit space."""
    if logits.ndim == 1:
        logits = ad.expand_dims(logits, 0)
    targets = np.atleast_2d(np.asarray(targets, dtype=logits.dtype.type))
    if targets.shape != tuple(logits.shape):
        raise ValueError(f"bce_loss: logits {logits.shape} vs targets {targets.shape}")
    y = Tensor(targets)
    per = -(y * ad.log_sigmoid(logits) + (1.0 - y) * ad.log_sigmoid(-logits))
    if mask is None:
        return ad.mean(per)
    m = np.atleast_2d(np.asarray(mask, dtype=logits.dtype.type))
    n_active = float(m.sum())
    if n_active == 0.0:
        return ad.sum_(per * Tensor(np.zeros_like(targets)))
    return ad.sum_(per * Tensor(m)) * (1.0 / n_active)


def noisy_age_targets(ages: np.ndarray, rng: RngStream | None, training: bool) -> np.ndarray:
    ages = np.atleast_1d(np.asarray(ages, dtype=np.float64))
    if not training:
        return ages
    if rng is None:
        raise ValueError("training-mode age loss needs a label_noise rng stream")
    return ages + rng.normal(ages.shape, std=AGE_NOISE_STD, dtype=np.float64)


def age_loss(pred: Tensor, ages, rng: RngStream | None = None,
             training: bool = False, beta: float = SMOOTH_L1_BETA) -> Tensor:
    """Smoothed-L1 between predictions and (noisy when training) age labels."""
    targets = noisy_age_targets(ages, rng, training)
    diff = pred - Tensor(targets.astype(pred.dtype.type))
    return ad.mean(ad.smooth_l1(diff, beta=beta))


def rotation_targets(Rs: np.ndarray, rng: RngStream | None, training: bool) -> np.ndarray:
    Rs = np.asarray(Rs, dtype=np.float64).reshape(-1, 3, 3)
    if not training:
        return Rs
    if rng is None:
        raise ValueError("training-mode rotation loss needs a label_noise rng stream")
    return np.stack([perturb_rotation(R, rng, std=ROTATION_NOISE_STD) for R in Rs])


def predicted_age(age_logits: Tensor) -> Tensor:
    return age_logits * AGE_SCALE + AGE_OFFSET


def task_loss(spec: TaskSpec, logits: Tensor, labels: dict,
              rng: RngStream | None = None, training: bool = False) -> Tensor:
    """Loss of one task given its logit slice and its label record."""
    if spec.kind == "single_label":
        return ce_loss(logits, labels["class"])
    if spec.kind == "multi_label":
        return bce_loss(logits, labels["bits"])
    if spec.kind == "scalar_regression":
        loss = age_loss(predicted_age(logits[:, 0]), labels["age"], rng, training)
        if spec.label_count > 1:
            loss = loss + ce_loss(logits[:, 1:], labels["gender"])
        return loss
    if spec.kind == "rotation":
        R_pred = rot6d_to_matrix(logits)
        R_true = rotation_targets(labels["rotation"], rng, training)
        return geodesic_loss(R_pred, R_true)
    raise ValueError(f"unknown task kind {spec.kind}")
