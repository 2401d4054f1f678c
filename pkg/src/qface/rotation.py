"""Rotation math for the head-pose task.

Rotations are parameterized for regression by their first two columns (the
continuous 6D code); Gram-Schmidt recovers the full matrix. Euler angles use
the ZYX (yaw-pitch-roll) convention throughout: R = Rz(yaw) Ry(pitch) Rx(roll).
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEGENERACY_EPS = 1e-8
GEODESIC_CLAMP_EPS = 1e-7
ROTATION_TOL = 1e-6


def euler_zyx_to_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return rz @ ry @ rx


def matrix_to_euler_zyx(R: np.ndarray) -> tuple[float, float, float]:
    """Recover (yaw, pitch, roll); yaw in (-pi, pi], pitch in [-pi/2, pi/2]."""
    pitch = float(np.arcsin(np.clip(-R[2, 0], -1.0, 1.0)))
    yaw = float(np.arctan2(R[1, 0], R[0, 0]))
    roll = float(np.arctan2(R[2, 1], R[2, 2]))
    return yaw, pitch, roll


def is_rotation(R: np.ndarray, tol: float = ROTATION_TOL) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        return False
    return bool(
        np.max(np.abs(R.T @ R - np.eye(3))) <= tol and abs(np.linalg.det(R) - 1.0) <= tol
    )


def check_rotation(R: np.ndarray, tol: float = ROTATION_TOL):
    if not is_rotation(R, tol):
        raise ValueError("not a rotation matrix (orthonormality/det +1 violated)")


def rotation_to_rot6d(R: np.ndarray) -> np.ndarray:
    """First two columns, flattened column-by-column."""
    R = np.asarray(R)
    return np.concatenate([R[:, 0], R[:, 1]])


def _cross3(a: Tensor, b: Tensor) -> Tensor:
    """Cross product on (..., 3) tensors via slicing."""
    a0, a1, a2 = a[..., 0:1], a[..., 1:2], a[..., 2:3]
    b0, b1, b2 = b[..., 0:1], b[..., 1:2], b[..., 2:3]
    return ad.concat([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def rot6d_to_matrix(code: Tensor) -> Tensor:
    """Gram-Schmidt a (..., 6) code into (..., 3, 3) rotation matrices.

    b1 = normalize(a1); b2 = normalize(a2 - (b1.a2) b1); b3 = b1 x b2.
    Near-zero first columns or collinear pairs are rejected rather than
    silently producing garbage frames.
    """
    if not isinstance(code, Tensor):
        code = Tensor(np.asarray(code, dtype=np.float64))
    if code.shape[-1] != 6:
        raise ValueError(f"rot6d code must have last extent 6, got {code.shape}")
    a1 = code[..., 0:3]
    a2 = code[..., 3:6]
    n1 = ad.sqrt(ad.sum_(a1 * a1, axis=-1, keepdims=True))
    if np.min(n1.data) < DEGENERACY_EPS:
        raise ValueError("rot6d code degenerate: first column has near-zero norm")
    b1 = a1 / n1
    proj = ad.sum_(b1 * a2, axis=-1, keepdims=True)
    u2 = a2 - proj * b1
    n2 = ad.sqrt(ad.sum_(u2 * u2, axis=-1, keepdims=True))
    if np.min(n2.data) < DEGENERACY_EPS:
        raise ValueError("rot6d code degenerate: columns are collinear")
    b2 = u2 / n2
    b3 = _cross3(b1, b2)
    cols = [ad.expand_dims(b, -1) for b in (b1, b2, b3)]
    return ad.concat(cols, axis=-1)


def rot6d_to_matrix_np(code: np.ndarray) -> np.ndarray:
    return rot6d_to_matrix(Tensor(np.asarray(code, dtype=np.float64))).data


def geodesic_distance_np(Ra: np.ndarray, Rb: np.ndarray) -> float:
    cos = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def geodesic_loss(R_pred: Tensor, R_true: np.ndarray,
                  eps: float = GEODESIC_CLAMP_EPS) -> Tensor:
    """Mean angular distance arccos((trace(Rp^T Rt) - 1)/2) over the batch.

    The cosine is clamped to [-1+eps, 1-eps]; gradients flow through the
    clamp interior only. Targets must satisfy the rotation invariants.
    """
    Rt = np.asarray(R_true)
    if Rt.shape != R_pred.shape:
        raise ValueError(f"geodesic_loss: shape mismatch {R_pred.shape} vs {Rt.shape}")
    for R in Rt.reshape(-1, 3, 3):
        check_rotation(R, tol=1e-5)
    prod = R_pred * Tensor(Rt.astype(R_pred.dtype.type))
    trace = ad.sum_(ad.sum_(prod, axis=-1), axis=-1)
    cos = (trace - 1.0) * 0.5
    ang = ad.arccos(ad.clip(cos, -1.0 + eps, 1.0 - eps))
    return ad.mean(ang)


def perturb_rotation(R: np.ndarray, rng, std: float = 0.01) -> np.ndarray:
    """Add entrywise Gaussian noise, then restore a valid rotation by
    re-orthonormalizing the first two columns. std=0 returns R unchanged."""
    check_rotation(R)
    if std == 0.0:
        return np.array(R, dtype=np.float64)
    noisy = np.asarray(R, dtype=np.float64) + rng.normal((3, 3), std=std, dtype=np.float64)
    return rot6d_to_matrix_np(rotation_to_rot6d(noisy))
