"""Deterministic synthetic face-like images with exact multi-task labels.

Every sample is generated from a small factor record; both the image and
all task labels are pure functions of it, so classification bits are
perfectly recoverable and regression targets carry no label noise. The
renderer encodes each factor visibly:

  expression   mouth curvature (7 distinct values)
  attributes   six fixed glyphs toggled on/off (table below)
  age          head ellipse radius and stripe-texture frequency
  gender       head fill brightness offset
  yaw/pitch    horizontal/vertical eye-dot displacement
  roll         in-plane rotation of the head ellipse (and its stripes)

Action-unit bits are fixed boolean functions of expression and attributes,
giving the cross-task correlation the query decoder is meant to exploit.
Rendering is 4x supersampled with a box filter, so images are bit-exact
reproducible per implementation of these rules.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pgm import write_pgm
from .rng import RngStream
from .rotation import euler_zyx_to_matrix

SUPERSAMPLE = 4
N_EXPRESSIONS = 7
N_ATTRIBUTES = 6
N_ACTION_UNITS = 4
ANGLE_RANGE = 0.5  # radians, symmetric

EXPRESSION_NAMES = ("surprise", "fear", "disgust", "happiness", "sadness", "anger", "neutral")
ATTRIBUTE_NAMES = ("brow_bar", "glasses", "cheek_dot", "chin_mark", "forehead_band", "ear_notch")

# declared bounding regions (x0, x1, y0, y1) in [-1, 1] image coordinates;
# toggling an attribute changes pixels only inside its region
GLYPH_REGIONS = {
    "brow_bar": (-0.34, 0.34, -0.50, -0.40),
    "glasses": (-0.44, 0.44, -0.22, -0.13),
    "cheek_dot": (0.22, 0.42, 0.02, 0.22),
    "chin_mark": (-0.16, 0.16, 0.50, 0.60),
    "forehead_band": (-0.36, 0.36, -0.68, -0.58),
    "ear_notch": (-0.70, -0.54, -0.09, 0.09),
}

BG_VALUE = 0.0
HEAD_FILL = 0.50
GENDER_BRIGHTNESS = 0.15
STRIPE_AMP = 0.05
GLYPH_VALUE = 0.95
MOUTH_VALUE = 0.02
EYE_VALUE = 1.0

EYE_BASE = (0.22, -0.28)
EYE_RADIUS = 0.075
EYE_SWING = 0.45
MOUTH_HALF_WIDTH = 0.34
MOUTH_Y = 0.33
MOUTH_AMP = 0.13
MOUTH_THICKNESS = 0.09


@dataclass(frozen=True)
class FaceFactors:
    expression: int
    attributes: tuple
    action_units: tuple
    age: float
    gender: int
    yaw: float
    pitch: float
    roll: float
    texture_seed: int

    def to_record(self) -> dict:
        return {
            "expression": self.expression,
            "attributes": list(self.attributes),
            "action_units": list(self.action_units),
            "age": self.age,
            "gender": self.gender,
            "yaw": self.yaw,
            "pitch": self.pitch,
            "roll": self.roll,
            "texture_seed": self.texture_seed,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "FaceFactors":
        return cls(
            expression=int(rec["expression"]),
            attributes=tuple(int(b) for b in rec["attributes"]),
            action_units=tuple(int(b) for b in rec["action_units"]),
            age=float(rec["age"]),
            gender=int(rec["gender"]),
            yaw=float(rec["yaw"]),
            pitch=float(rec["pitch"]),
            roll=float(rec["roll"]),
            texture_seed=int(rec["texture_seed"]),
        )


def derive_action_units(expression: int, attributes) -> tuple:
    """Fixed AU truth table: each bit XORs an expression predicate with one
    attribute bit, correlating the tasks by construction."""
    a = tuple(int(b) for b in attributes)
    return (
        int(expression == 3) ^ a[0],
        int(expression in (0, 1)) ^ a[1],
        int(expression in (2, 5)) ^ a[2],
        int(expression == 4) ^ a[3],
    )


def sample_factors(rng: RngStream) -> FaceFactors:
    expression = int(rng.integers(0, N_EXPRESSIONS))
    attributes = tuple(int(b) for b in rng.integers(0, 2, (N_ATTRIBUTES,)))
    age = float(rng.uniform(low=0.0, high=100.0))
    gender = int(rng.integers(0, 2))
    yaw, pitch, roll = (float(v) for v in rng.uniform((3,), -ANGLE_RANGE, ANGLE_RANGE))
    texture_seed = int(rng.integers(0, 2 ** 31))
    return FaceFactors(
        expression=expression, attributes=attributes,
        action_units=derive_action_units(expression, attributes),
        age=age, gender=gender, yaw=yaw, pitch=pitch, roll=roll,
        texture_seed=texture_seed,
    )


def mouth_curvature(expression: int) -> float:
    return -2.1 + 0.7 * expression


def _disc(X, Y, cx, cy, r):
    return (X - cx) ** 2 + (Y - cy) ** 2 <= r * r


def _box(X, Y, x0, x1, y0, y1):
    return (X >= x0) & (X <= x1) & (Y >= y0) & (Y <= y1)


def render(factors: FaceFactors, image_size: int) -> np.ndarray:
    """(H, W) grayscale in [0, 1]; callers replicate to 3 channels."""
    n = image_size * SUPERSAMPLE
    axis = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    X, Y = np.meshgrid(axis, axis)

    canvas = np.full((n, n), BG_VALUE)

    a = factors.age / 100.0
    rx = 0.55 + 0.20 * a
    ry = 0.72 + 0.18 * a
    cr, sr = np.cos(factors.roll), np.sin(factors.roll)
    U = cr * X + sr * Y
    V = -sr * X + cr * Y
    head = (U / rx) ** 2 + (V / ry) ** 2 <= 1.0
    fill = HEAD_FILL + GENDER_BRIGHTNESS * factors.gender
    freq = 2.0 + 6.0 * a
    phase = (factors.texture_seed % 997) / 997.0 * 2.0 * np.pi
    stripes = fill + STRIPE_AMP * np.sin(2.0 * np.pi * freq * V + phase)
    canvas[head] = stripes[head]

    for name, bit in zip(ATTRIBUTE_NAMES, factors.attributes):
        if not bit:
            continue
        x0, x1, y0, y1 = GLYPH_REGIONS[name]
        if name == "cheek_dot":
            mask = _disc(X, Y, (x0 + x1) / 2.0, (y0 + y1) / 2.0, (x1 - x0) / 2.0)
        else:
            mask = _box(X, Y, x0, x1, y0, y1)
        canvas[mask] = GLYPH_VALUE

    curv = mouth_curvature(factors.expression)
    rel = X / MOUTH_HALF_WIDTH
    mouth_y = MOUTH_Y + MOUTH_AMP * curv * (rel ** 2 - 0.5)
    mouth = (np.abs(X) <= MOUTH_HALF_WIDTH) & (np.abs(Y - mouth_y) <= MOUTH_THICKNESS / 2.0)
    canvas[mouth] = MOUTH_VALUE

    dx = EYE_SWING * factors.yaw
    dy = EYE_SWING * factors.pitch
    for sx in (-1.0, 1.0):
        eye = _disc(X, Y, sx * EYE_BASE[0] + dx, EYE_BASE[1] + dy, EYE_RADIUS)
        canvas[eye] = EYE_VALUE

    down = canvas.reshape(image_size, SUPERSAMPLE, image_size, SUPERSAMPLE).mean(axis=(1, 3))
    return down.astype(np.float32)


def labels(factors: FaceFactors) -> dict:
    return {
        "expression": factors.expression,
        "attributes": np.array(factors.attributes, dtype=np.int64),
        "action_units": np.array(factors.action_units, dtype=np.int64),
        "age": factors.age,
        "gender": factors.gender,
        "rotation": euler_zyx_to_matrix(factors.yaw, factors.pitch, factors.roll),
        "ypr": np.array([factors.yaw, factors.pitch, factors.roll]),
    }


def _render_worker_count() -> int:
    env = os.environ.get("QFACE_THREADS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


class SynthDataset:
    """A rendered split: factor records, stacked label arrays, image cache."""

    def __init__(self, factors: list, image_size: int):
        self.factors = list(factors)
        self.image_size = image_size
        recs = [labels(f) for f in self.factors]
        self.expression = np.array([r["expression"] for r in recs], dtype=np.int64)
        self.attributes = np.stack([r["attributes"] for r in recs])
        self.action_units = np.stack([r["action_units"] for r in recs])
        self.age = np.array([r["age"] for r in recs])
        self.gender = np.array([r["gender"] for r in recs], dtype=np.int64)
        self.rotation = np.stack([r["rotation"] for r in recs])
        self.ypr = np.stack([r["ypr"] for r in recs])
        workers = _render_worker_count()
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                imgs = list(pool.map(lambda f: render(f, image_size), self.factors))
        else:
            imgs = [render(f, image_size) for f in self.factors]
        self.images = np.stack(imgs)

    def __len__(self):
        return len(self.factors)

    def batch_images(self, idx) -> np.ndarray:
        """(B, H, W, 3) float32; grayscale replicated across channels."""
        return np.repeat(self.images[idx][..., None], 3, axis=-1)

    def batch_labels(self, idx, task_name: str) -> dict:
        if task_name == "expression":
            return {"class": self.expression[idx]}
        if task_name == "attributes":
            return {"bits": self.attributes[idx]}
        if task_name == "action_units":
            return {"bits": self.action_units[idx]}
        if task_name == "age_gender":
            return {"age": self.age[idx], "gender": self.gender[idx]}
        if task_name == "pose":
            return {"rotation": self.rotation[idx], "ypr": self.ypr[idx]}
        raise KeyError(f"unknown task '{task_name}'")


def build_split(n_train: int, n_test: int, seed: int, image_size: int = 64):
    """Disjoint train/test datasets drawn from one factor stream."""
    stream = RngStream(seed, "data")
    all_factors = [sample_factors(stream) for _ in range(n_train + n_test)]
    train = SynthDataset(all_factors[:n_train], image_size)
    test = SynthDataset(all_factors[n_train:], image_size)
    return train, test


def split_manifest(dataset: SynthDataset, seed: int, role: str) -> dict:
    return {
        "role": role,
        "seed": seed,
        "image_size": dataset.image_size,
        "count": len(dataset),
        "samples": [
            {"index": i, "factors": f.to_record(),
             "labels": {
                 "expression": f.expression,
                 "attributes": list(f.attributes),
                 "action_units": list(f.action_units),
                 "age": f.age,
                 "gender": f.gender,
                 "ypr": [f.yaw, f.pitch, f.roll],
             }}
            for i, f in enumerate(dataset.factors)
        ],
    }


def write_split(out_dir, n_train: int, n_test: int, seed: int,
                image_size: int = 64, render_images: bool = False):
    """Write train/test manifests (and optionally all PGM images)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = build_split(n_train, n_test, seed, image_size)
    for role, ds in (("train", train), ("test", test)):
        manifest = split_manifest(ds, seed, role)
        with open(out_dir / f"{role}_manifest.json", "w") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=1)
            fh.write("\n")
        if render_images:
            img_dir = out_dir / f"{role}_images"
            img_dir.mkdir(exist_ok=True)
            for i in range(len(ds)):
                write_pgm(img_dir / f"{role}_{i:05d}.pgm", ds.images[i])
    return train, test


def load_split_manifest(path) -> SynthDataset:
    with open(path) as fh:
        manifest = json.load(fh)
    factors = [FaceFactors.from_record(s["factors"]) for s in manifest["samples"]]
    return SynthDataset(factors, manifest["image_size"])
