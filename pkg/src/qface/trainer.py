"""Multi-task fine-tuning loop.

One optimization step samples one batch per registered task, runs a full
forward per batch, applies each task's loss to its own logit slice, sums
the weighted losses, and performs a single backward plus one AdamW update
against a consistent parameter snapshot. All randomness flows through
counter-based streams so runs reproduce byte-identically and checkpoint
resume continues the exact trajectory.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .autodiff import backward
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .metrics import ccc, euler_angles, euler_mae, mae, mean_accuracy, per_class_f1, \
    per_label_f1, top1, write_metrics_csv
from .model import predictions_from_logits
from .optim import AdamW, OptimConfig, ScheduleConfig, lr_at
from .rng import RngStream
from .tasks import task_loss

TRAIN_STREAMS = ("data", "label_noise", "drop_path")


def sample_task_batches(train_ds, tasks, batch_size: int, data_rng: RngStream) -> dict:
    """Draw one independent batch per task from the shared training split."""
    batches = {}
    for spec in tasks:
        idx = data_rng.integers(0, len(train_ds), (batch_size,))
        batches[spec.name] = (train_ds.batch_images(idx), train_ds.batch_labels(idx, spec.name))
    return batches


def multi_task_step(model, task_batches: dict, optim: AdamW, lr: float,
                    noise_rng: RngStream | None, drop_rng: RngStream | None) -> dict:
    """One accumulate-and-update step; returns the per-task loss breakdown
    plus the weighted total (n_tasks + 1 entries).

    The per-task batches ride one concatenated forward pass: every model op
    is per-sample independent, so this is exactly the sum of separate
    forwards, against a single consistent parameter snapshot.
    """
    for spec in model.cfg.tasks:
        if spec.name not in task_batches:
            raise ValueError(f"multi_task_step: missing batch for task '{spec.name}'")
    optim.zero_grad()
    images = np.concatenate([task_batches[spec.name][0] for spec in model.cfg.tasks], axis=0)
    z, _ = model.forward(images, train=True, drop_rng=drop_rng)
    total = None
    breakdown: dict = {}
    offset = 0
    for spec in model.cfg.tasks:
        batch_images, labels = task_batches[spec.name]
        b = batch_images.shape[0]
        s, e = model.slices[spec.name]
        loss = task_loss(spec, z[offset:offset + b, s:e], labels,
                         rng=noise_rng, training=True)
        offset += b
        breakdown[spec.name] = float(loss.data)
        weighted = loss * spec.loss_weight
        total = weighted if total is None else total + weighted
    backward(total)
    optim.step(lr)
    breakdown["total"] = float(total.data)
    return breakdown


def evaluate(model, dataset, batch_size: int = 256, max_images: int | None = None) -> dict:
    """Deterministic noise-free evaluation; returns {task: {metric: value}}."""
    n = len(dataset) if max_images is None else min(len(dataset), max_images)
    zs = []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        z, _ = model.forward(dataset.batch_images(idx), train=False)
        zs.append(z.data)
    z = np.concatenate(zs, axis=0)
    preds = predictions_from_logits(z, model.cfg.tasks)
    all_idx = np.arange(n)
    out: dict = {}
    for spec in model.cfg.tasks:
        labels = dataset.batch_labels(all_idx, spec.name)
        p = preds[spec.name]
        if spec.kind == "single_label":
            f1s = per_class_f1(p["class"], labels["class"], spec.label_count)
            out[spec.name] = {"top1": top1(p["logits"], labels["class"]),
                              "macro_f1": float(f1s.mean())}
        elif spec.kind == "multi_label":
            f1s = per_label_f1(p["bits"], labels["bits"])
            out[spec.name] = {"mean_accuracy": mean_accuracy(p["bits"], labels["bits"]),
                              "macro_f1": float(f1s.mean())}
        elif spec.kind == "scalar_regression":
            rec = {"age_mae": mae(p["age"], labels["age"]),
                   "age_ccc": ccc(p["age"], labels["age"])}
            if "gender" in p:
                rec["gender_accuracy"] = float(np.mean(p["gender"] == labels["gender"]))
            out[spec.name] = rec
        elif spec.kind == "rotation":
            pred_ypr = euler_angles(p["rotation"])
            true_ypr = euler_angles(labels["rotation"])
            per_angle = [ccc(pred_ypr[:, k], true_ypr[:, k]) for k in range(3)]
            out[spec.name] = {"euler_mae": euler_mae(p["rotation"], labels["rotation"]),
                              "euler_ccc": float(np.mean(per_angle))}
    return out


def metrics_rows(metrics: dict) -> list:
    rows = []
    for task in metrics:
        for metric, value in metrics[task].items():
            rows.append((task, metric, value))
    return rows


def table7_scores(metrics: dict, tasks) -> dict:
    """Per-task [0,1] scores for the ablation table: macro F1 for
    classification tasks, CCC (floored at 0) for regression tasks."""
    scores: dict = {}
    for spec in tasks:
        m = metrics[spec.name]
        if spec.kind in ("single_label", "multi_label"):
            scores[spec.name] = float(np.clip(m["macro_f1"], 0.0, 1.0))
        elif spec.kind == "scalar_regression":
            scores[spec.name] = float(np.clip(m["age_ccc"], 0.0, 1.0))
        else:
            scores[spec.name] = float(np.clip(m["euler_ccc"], 0.0, 1.0))
    return scores


def save_train_checkpoint(path, model, optim: AdamW, step: int, rngs: dict,
                          extra_meta: dict | None = None):
    arrays = dict(model.params)
    arrays.update(optim.state_arrays())
    meta = {
        "step": step,
        "optim_step": optim.step_count,
        "model_kind": model.kind,
        "rng": {p: rngs[p].state() for p in rngs},
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, arrays, meta)


def restore_train_checkpoint(path, model, optim: AdamW):
    arrays, meta = load_checkpoint(path)
    load_into(model.params, arrays)
    optim.load_state_arrays(arrays, meta["optim_step"])
    rngs = {p: RngStream.from_state(s) for p, s in meta["rng"].items()}
    return int(meta["step"]), rngs


def finetune(model, train_ds, test_ds, sched: ScheduleConfig, optim_cfg: OptimConfig,
             batch_size: int, seed: int, out_dir, run_steps: int | None = None,
             resume: str | None = None, eval_max_images: int | None = None) -> dict:
    """Train until sched.total_steps (or `run_steps` more steps); writes
    train_log.csv, periodic eval_step*.csv, eval_final.csv, model.ckpt."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    optim = AdamW(model.params, optim_cfg, model.cfg.encoder.depth, sched.layer_decay)
    rngs = {p: RngStream(seed, p) for p in TRAIN_STREAMS}
    start = 0
    if resume is not None:
        start, rngs = restore_train_checkpoint(resume, model, optim)
    stop = sched.total_steps if run_steps is None else min(start + run_steps, sched.total_steps)

    log_path = out_dir / "train_log.csv"
    fresh = resume is None
    with open(log_path, "w" if fresh else "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["step", "lr"] +
                            [f"loss_{t.name}" for t in model.cfg.tasks] + ["loss_total"])
        for step in range(start, stop):
            lr = lr_at(step, sched)
            batches = sample_task_batches(train_ds, model.cfg.tasks, batch_size, rngs["data"])
            breakdown = multi_task_step(model, batches, optim, lr,
                                        rngs["label_noise"], rngs["drop_path"])
            writer.writerow([step, repr(lr)] +
                            [repr(breakdown[t.name]) for t in model.cfg.tasks] +
                            [repr(breakdown["total"])])
            done = step + 1
            if sched.eval_every and done % sched.eval_every == 0 and done < stop:
                m = evaluate(model, test_ds, max_images=eval_max_images)
                write_metrics_csv(out_dir / f"eval_step{done}.csv", metrics_rows(m))

    ckpt_path = out_dir / "model.ckpt"
    save_train_checkpoint(ckpt_path, model, optim, stop, rngs)
    final_metrics = evaluate(model, test_ds, max_images=eval_max_images)
    write_metrics_csv(out_dir / "eval_final.csv", metrics_rows(final_metrics))
    return {"metrics": final_metrics, "ckpt": ckpt_path, "log": log_path, "steps_done": stop}
