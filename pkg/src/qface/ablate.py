"""Desk-scale ablation protocol.

For each seed: pretrain one encoder, then fine-tune four variants from the
same checkpoint: a group of task-specific single-task models, the
multi-head baseline, the query decoder without multi-stage fusion, and the
full model. Every variant is scored on the held-out split with macro F1
for classification tasks and CCC for regression tasks, summarized by the
AVG metric; the aggregate table has exactly one row per variant.

Seeds are independent end to end, so they may run as parallel worker
processes; QFACE_THREADS caps that parallelism (default 1, sequential).
"""
from __future__ import annotations

import csv
import dataclasses
import os
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .baseline import MultiHead
from .checkpoint import load_checkpoint, load_into
from .config import RunConfig, default_pretrain_schedule
from .metrics import avg_score
from .mim import pretrain
from .model import QFace
from .synthdata import build_split
from .trainer import evaluate, finetune, table7_scores

VARIANTS = ("task_specific", "multihead", "qface_womff", "qface")

DEFAULT_ABLATE_SEEDS = 3
DEFAULT_ABLATE_PRETRAIN_STEPS = 600
DEFAULT_ABLATE_FINETUNE_STEPS = 600

# set in the parent before forking seed workers: (run_cfg, train_ds, test_ds)
_WORK = None


def _finetune_variant(run_cfg: RunConfig, variant: str, encoder_arrays: dict,
                      train_ds, test_ds, seed: int, steps: int, out_dir) -> dict:
    """Train one variant from a shared pretrained encoder; returns its
    per-task [0,1] scores."""
    sched = dataclasses.replace(run_cfg.schedule, total_steps=steps,
                                warmup_steps=min(run_cfg.schedule.warmup_steps, steps // 10),
                                eval_every=0)
    eval_cap = run_cfg.data.eval_max_images or None

    def build(model_cfg, kind):
        model = (MultiHead if kind == "multihead" else QFace).build(model_cfg, seed)
        load_into(model.params, encoder_arrays, prefix="encoder.")
        return model

    if variant == "task_specific":
        scores = {}
        for spec in run_cfg.tasks:
            model = build(run_cfg.model_config(tasks=(spec,)), "qface")
            finetune(model, train_ds, test_ds, sched, run_cfg.optimizer,
                     run_cfg.data.batch_size, seed, Path(out_dir) / spec.name,
                     eval_max_images=eval_cap)
            metrics = evaluate(model, test_ds, max_images=eval_cap)
            scores.update(table7_scores(metrics, (spec,)))
        return scores

    if variant == "multihead":
        model = build(run_cfg.model_config(), "multihead")
    elif variant == "qface_womff":
        model = build(run_cfg.model_config(use_mff=False), "qface")
    elif variant == "qface":
        model = build(run_cfg.model_config(use_mff=True), "qface")
    else:
        raise ValueError(f"unknown ablation variant '{variant}'")
    finetune(model, train_ds, test_ds, sched, run_cfg.optimizer,
             run_cfg.data.batch_size, seed, out_dir, eval_max_images=eval_cap)
    metrics = evaluate(model, test_ds, max_images=eval_cap)
    return table7_scores(metrics, run_cfg.tasks)


def _run_one_seed(args) -> dict:
    k, seed, out_dir, pretrain_steps, finetune_steps = args
    run_cfg, train_ds, test_ds = _WORK
    seed_dir = Path(out_dir) / f"seed{k}"
    pre_sched = dataclasses.replace(default_pretrain_schedule(), total_steps=pretrain_steps,
                                    warmup_steps=min(100, pretrain_steps // 10))
    pre = pretrain(train_ds, run_cfg.encoder, pre_sched, run_cfg.optimizer,
                   pretrain_steps, run_cfg.data.batch_size, run_cfg.data.mask_ratio,
                   seed, seed_dir / "pretrain")
    encoder_arrays, _ = load_checkpoint(pre["ckpt"])
    seed_rows = {}
    for variant in VARIANTS:
        seed_rows[variant] = _finetune_variant(
            run_cfg, variant, encoder_arrays, train_ds, test_ds, seed,
            finetune_steps, seed_dir / variant)
    return seed_rows


def _worker_cap() -> int:
    env = os.environ.get("QFACE_THREADS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def _score_columns(run_cfg: RunConfig) -> list:
    cols = []
    for spec in run_cfg.tasks:
        kind = "f1" if spec.kind in ("single_label", "multi_label") else "ccc"
        cols.append((spec.name, f"{kind}_{spec.name}"))
    return cols


def _write_table(path, run_cfg: RunConfig, rows: dict):
    cols = _score_columns(run_cfg)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant"] + [c for _, c in cols] + ["avg"])
        for variant in VARIANTS:
            scores = rows[variant]
            per_task = [scores[name] for name, _ in cols]
            w.writerow([variant] + [repr(100.0 * s) for s in per_task] +
                       [repr(avg_score(per_task))])


def run_ablation(run_cfg: RunConfig, out_dir, n_seeds: int = DEFAULT_ABLATE_SEEDS,
                 pretrain_steps: int = DEFAULT_ABLATE_PRETRAIN_STEPS,
                 finetune_steps: int = DEFAULT_ABLATE_FINETUNE_STEPS) -> dict:
    global _WORK
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    master = run_cfg.seeds.master
    train_ds, test_ds = build_split(run_cfg.data.n_train, run_cfg.data.n_test,
                                    master, run_cfg.encoder.image_size)
    _WORK = (run_cfg, train_ds, test_ds)
    jobs = [(k, master + k, out_dir, pretrain_steps, finetune_steps)
            for k in range(n_seeds)]
    workers = min(_worker_cap(), n_seeds)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers,
                                 mp_context=get_context("fork")) as pool:
            per_seed = list(pool.map(_run_one_seed, jobs))
    else:
        per_seed = [_run_one_seed(j) for j in jobs]
    _WORK = None

    for k, seed_rows in enumerate(per_seed):
        _write_table(out_dir / f"table7_seed{k}.csv", run_cfg, seed_rows)

    mean_rows = {}
    for variant in VARIANTS:
        mean_rows[variant] = {
            spec.name: float(np.mean([s[variant][spec.name] for s in per_seed]))
            for spec in run_cfg.tasks
        }
    _write_table(out_dir / "table7.csv", run_cfg, mean_rows)

    summary = {
        "per_seed": per_seed,
        "mean": mean_rows,
        "avg": {v: avg_score([mean_rows[v][t.name] for t in run_cfg.tasks]) for v in VARIANTS},
    }
    return summary
