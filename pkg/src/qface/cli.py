"""Command-line interface: the full workflow in one executable.

Subcommands: gen-data, pretrain, finetune, eval, attn, ablate. Every run
directory receives the fully-resolved config echo; rerunning a command with
the same config and seeds reproduces its outputs byte-identically. Errors
exit non-zero with a single machine-parsable line on stderr.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .ablate import (DEFAULT_ABLATE_FINETUNE_STEPS, DEFAULT_ABLATE_PRETRAIN_STEPS,
                     DEFAULT_ABLATE_SEEDS, run_ablation)
from .baseline import MultiHead
from .checkpoint import load_checkpoint, load_into
from .config import RunConfig, default_pretrain_schedule, echo_config, load_run_config
from .decoder import export_attention
from .mim import pretrain
from .model import QFace, all_label_names, task_label_names
from .synthdata import build_split, write_split
from .trainer import evaluate, finetune, metrics_rows, write_metrics_csv

MODEL_CHOICES = ("qface", "multihead", "taskspecific")


def _build_model(cfg: RunConfig, model_kind: str, tasks=None):
    model_cfg = cfg.model_config(tasks=tasks)
    if model_kind == "multihead":
        return MultiHead.build(model_cfg, cfg.seeds.master)
    return QFace.build(model_cfg, cfg.seeds.master)


def _load_encoder_init(model, init_path):
    arrays, _ = load_checkpoint(init_path)
    loaded = load_into(model.params, arrays, prefix="encoder.")
    if not loaded:
        raise ValueError(f"init checkpoint {init_path} contains no encoder parameters")


def _datasets(cfg: RunConfig):
    return build_split(cfg.data.n_train, cfg.data.n_test, cfg.seeds.master,
                       cfg.encoder.image_size)


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    echo_config(cfg, args.out)
    write_split(args.out, args.train if args.train is not None else cfg.data.n_train,
                args.test if args.test is not None else cfg.data.n_test,
                cfg.seeds.master, cfg.encoder.image_size, render_images=args.render)
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    if args.config is None:
        import dataclasses
        cfg = dataclasses.replace(cfg, schedule=default_pretrain_schedule())
    echo_config(cfg, args.out)
    train_ds, test_ds = _datasets(cfg)
    steps = args.steps if args.steps is not None else cfg.schedule.total_steps
    result = pretrain(train_ds, cfg.encoder, cfg.schedule, cfg.optimizer, steps,
                      cfg.data.batch_size, cfg.data.mask_ratio, cfg.seeds.master,
                      args.out, heldout_ds=test_ds)
    print(f"pretrain done: heldout masked L1 {result['initial_heldout_l1']:.4f} -> "
          f"{result['final_heldout_l1']:.4f}; checkpoint {result['ckpt']}")
    return 0


def cmd_finetune(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    echo_config(cfg, args.out)
    train_ds, test_ds = _datasets(cfg)
    eval_cap = cfg.data.eval_max_images or None

    if args.model == "taskspecific":
        if args.resume:
            raise ValueError("taskspecific runs do not support --resume")
        for spec in cfg.tasks:
            model = _build_model(cfg, "qface", tasks=(spec,))
            if args.init:
                _load_encoder_init(model, args.init)
            res = finetune(model, train_ds, test_ds, cfg.schedule, cfg.optimizer,
                           cfg.data.batch_size, cfg.seeds.master,
                           Path(args.out) / spec.name, run_steps=args.steps,
                           eval_max_images=eval_cap)
            print(f"taskspecific[{spec.name}]: {res['metrics'][spec.name]}")
        return 0

    model = _build_model(cfg, args.model)
    if args.init:
        _load_encoder_init(model, args.init)
    res = finetune(model, train_ds, test_ds, cfg.schedule, cfg.optimizer,
                   cfg.data.batch_size, cfg.seeds.master, args.out,
                   run_steps=args.steps, resume=args.resume, eval_max_images=eval_cap)
    print(f"finetune done at step {res['steps_done']}; checkpoint {res['ckpt']}")
    for task, vals in res["metrics"].items():
        print(f"  {task}: " + ", ".join(f"{k}={v:.4f}" for k, v in vals.items()))
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    echo_config(cfg, args.out)
    _, test_ds = _datasets(cfg)
    model = _build_model(cfg, args.model)
    if args.ckpt:
        arrays, _ = load_checkpoint(args.ckpt)
        load_into(model.params, arrays)
    metrics = evaluate(model, test_ds, max_images=cfg.data.eval_max_images or None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", metrics_rows(metrics))
    for task, vals in metrics.items():
        print(f"{task}: " + ", ".join(f"{k}={v:.4f}" for k, v in vals.items()))
    return 0


def cmd_attn(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    if not cfg.mff.enabled and args.model == "qface":
        pass  # single-stage records are still exportable
    if args.model == "multihead":
        raise ValueError("attention export requires the query decoder (--model qface)")
    echo_config(cfg, args.out)
    _, test_ds = _datasets(cfg)
    model = _build_model(cfg, "qface")
    if args.ckpt:
        arrays, _ = load_checkpoint(args.ckpt)
        load_into(model.params, arrays)
    idx = args.index
    if not (0 <= idx < len(test_ds)):
        raise ValueError(f"--index {idx} outside the test split (size {len(test_ds)})")
    images = test_ds.batch_images([idx])
    _, records = model.forward(images, train=False, record=True)
    export_attention(records, all_label_names(model.cfg.tasks), args.out)
    print(f"wrote {len(records)} blocks of attention maps to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    echo_config(cfg, args.out)
    summary = run_ablation(cfg, args.out, n_seeds=args.seeds_count,
                           pretrain_steps=args.pretrain_steps,
                           finetune_steps=args.finetune_steps)
    for variant, avg in summary["avg"].items():
        print(f"{variant}: AVG {avg:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qface",
                                description="query-driven multi-task face analysis, desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt=False, init=False, model=False):
        sp.add_argument("--config", default=None, help="run config JSON (defaults if omitted)")
        sp.add_argument("--out", required=True, help="run output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the master seed")
        if ckpt:
            sp.add_argument("--ckpt", default=None, help="checkpoint to load")
        if init:
            sp.add_argument("--init", default=None, help="pretrained encoder checkpoint")
        if model:
            sp.add_argument("--model", choices=MODEL_CHOICES, default="qface")

    sp = sub.add_parser("gen-data", help="write dataset manifests (and PGM images)")
    common(sp)
    sp.add_argument("--train", type=int, default=None)
    sp.add_argument("--test", type=int, default=None)
    sp.add_argument("--render", action="store_true", help="also write all PGM images")
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="masked-image-modeling pretraining")
    common(sp)
    sp.add_argument("--steps", type=int, default=None, help="override schedule.total_steps")
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("finetune", help="multi-task fine-tuning")
    common(sp, init=True, model=True)
    sp.add_argument("--resume", default=None, help="resume a fine-tuning checkpoint")
    sp.add_argument("--steps", type=int, default=None, help="run at most this many steps now")
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    common(sp, ckpt=True, model=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("attn", help="export cross-attention maps and marginals")
    common(sp, ckpt=True, model=True)
    sp.add_argument("--index", type=int, default=0, help="test-split image index")
    sp.set_defaults(fn=cmd_attn)

    sp = sub.add_parser("ablate", help="run the four-variant ablation table")
    common(sp)
    sp.add_argument("--seeds-count", type=int, default=DEFAULT_ABLATE_SEEDS)
    sp.add_argument("--pretrain-steps", type=int, default=DEFAULT_ABLATE_PRETRAIN_STEPS)
    sp.add_argument("--finetune-steps", type=int, default=DEFAULT_ABLATE_FINETUNE_STEPS)
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # single-line machine-parsable error contract
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
