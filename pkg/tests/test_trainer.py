"""Optimizer, schedule, stochastic depth, and training-loop contracts."""
import dataclasses

import numpy as np
import pytest

from qface.autodiff import Tensor, backward
from qface.baseline import MultiHead
from qface.model import ModelConfig, QFace, cast_params
from qface.optim import (AdamW, OptimConfig, ScheduleConfig, drop_path_mask,
                         layer_lr_scale, lr_at, param_group_index)
from qface.rng import RngStream
from qface.tasks import task_loss
from qface.trainer import (evaluate, finetune, multi_task_step, restore_train_checkpoint,
                           sample_task_batches, save_train_checkpoint, table7_scores)

SCHED = ScheduleConfig(peak_lr=1e-3, warmup_steps=100, total_steps=1000, floor_lr=1e-6,
                       layer_decay=0.85)


# --- schedule ---------------------------------------------------------------

def test_lr_at_warmup_end_is_peak():
    assert lr_at(100, SCHED) == 1e-3


def test_lr_at_total_is_floor():
    assert abs(lr_at(1000, SCHED) - 1e-6) < 1e-18


def test_lr_at_cosine_midpoint():
    mid = 100 + (1000 - 100) // 2
    assert abs(lr_at(mid, SCHED) - (1e-3 + 1e-6) / 2) < 1e-12


def test_lr_monotone_after_warmup():
    vals = [lr_at(s, SCHED) for s in range(100, 1001)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(warmup_steps=10, total_steps=10)
    with pytest.raises(ValueError):
        ScheduleConfig(layer_decay=0.0)


# --- layer decay --------------------------------------------------------------

def test_layer_scale_examples():
    assert layer_lr_scale(6, 6, 0.85) == 1.0
    assert abs(layer_lr_scale(5, 6, 0.85) - 0.85) < 1e-15
    assert abs(layer_lr_scale(0, 6, 0.85) - 0.85 ** 6) < 1e-12
    assert abs(0.85 ** 6 - 0.3771) < 1e-3


def test_param_group_mapping():
    assert param_group_index("encoder.patch.w", 6) == 0
    assert param_group_index("encoder.cls", 6) == 0
    assert param_group_index("encoder.block3.attn.wq", 6) == 3
    assert param_group_index("mff.se", 6) == 6
    assert param_group_index("decoder.q", 6) == 6
    assert param_group_index("heads.w", 6) == 6


# --- AdamW ---------------------------------------------------------------------

def _single_param(value=1.0):
    p = Tensor(np.array([value], dtype=np.float32), requires_grad=True)
    return {"heads.w2d": Tensor(np.full((1, 1), value, np.float32), requires_grad=True),
            "heads.b": p}


def test_adamw_zero_grad_no_decay_is_identity():
    params = {"w": Tensor(np.ones((2, 2), np.float32), requires_grad=True)}
    opt = AdamW(params, OptimConfig(weight_decay=0.0), encoder_depth=1, layer_decay=1.0)
    opt.step(0.1)
    np.testing.assert_array_equal(params["w"].data, np.ones((2, 2)))


def test_adamw_first_step_closed_form():
    # g=1: m_hat=1, v_hat=1 -> update = lr / (1 + eps)
    params = {"x.w": Tensor(np.full((1, 1), 5.0, np.float32), requires_grad=True)}
    opt = AdamW(params, OptimConfig(weight_decay=0.0), encoder_depth=1, layer_decay=1.0)
    params["x.w"].grad = np.ones((1, 1), np.float32)
    opt.step(0.1)
    expected = 5.0 - 0.1 * (1.0 / (1.0 + 1e-8))
    assert abs(float(params["x.w"].data[0, 0]) - expected) < 1e-7


def test_adamw_pure_decay_shrinks_weights():
    params = {"x.w": Tensor(np.full((2, 2), 3.0, np.float32), requires_grad=True)}
    opt = AdamW(params, OptimConfig(weight_decay=0.05), encoder_depth=1, layer_decay=1.0)
    opt.step(0.1)  # zero grads: only the decoupled decay acts
    np.testing.assert_allclose(params["x.w"].data, np.full((2, 2), 3.0 * (1 - 0.1 * 0.05)),
                               rtol=1e-6)


def test_adamw_skips_decay_for_tables_and_vectors():
    params = {
        "decoder.q": Tensor(np.full((2, 2), 3.0, np.float32), requires_grad=True),
        "mff.se": Tensor(np.full((3, 2), 3.0, np.float32), requires_grad=True),
        "encoder.cls": Tensor(np.full((1, 2), 3.0, np.float32), requires_grad=True),
        "a.b": Tensor(np.full(2, 3.0, np.float32), requires_grad=True),
        "a.g": Tensor(np.full(2, 3.0, np.float32), requires_grad=True),
    }
    opt = AdamW(params, OptimConfig(weight_decay=0.05), encoder_depth=1, layer_decay=1.0)
    opt.step(0.1)
    for name, t in params.items():
        np.testing.assert_array_equal(t.data, np.full_like(t.data, 3.0))


# --- drop path -------------------------------------------------------------------

def test_drop_path_rate_zero_keeps_all():
    keep, scales = drop_path_mask(0.0, 5, None)
    assert keep.all() and np.all(scales == 1.0)


def test_drop_path_first_layer_never_dropped():
    rng = RngStream(0, "drop_path")
    for _ in range(200):
        keep, _ = drop_path_mask(0.5, 4, rng)
        assert keep[0]


def test_drop_path_top_layer_frequency():
    rng = RngStream(1, "drop_path")
    n = 10_000
    rate = 0.2
    drops = sum(1 for _ in range(n) if not drop_path_mask(rate, 6, rng)[0][-1])
    sigma = np.sqrt(n * rate * (1 - rate))
    assert abs(drops - n * rate) < 3 * sigma


def test_drop_path_scales_are_inverse_keep_prob():
    rng = RngStream(2, "drop_path")
    rate, depth = 0.4, 5
    keep, scales = drop_path_mask(rate, depth, rng)
    for l in range(depth):
        p_drop = rate * l / (depth - 1)
        if keep[l]:
            assert abs(scales[l] - 1.0 / (1.0 - p_drop)) < 1e-12
        else:
            assert scales[l] == 0.0


# --- multi-task step -----------------------------------------------------------

def _tiny_model(tiny_model_cfg, seed=0, kind="qface"):
    cls = MultiHead if kind == "multihead" else QFace
    return cls.build(tiny_model_cfg, seed)


def test_step_missing_batch_rejected(tiny_model_cfg, tiny_split):
    train, _ = tiny_split
    model = _tiny_model(tiny_model_cfg)
    opt = AdamW(model.params, OptimConfig(), tiny_model_cfg.encoder.depth, 0.85)
    rngs = {p: RngStream(0, p) for p in ("data", "label_noise", "drop_path")}
    batches = sample_task_batches(train, tiny_model_cfg.tasks, 4, rngs["data"])
    del batches["pose"]
    with pytest.raises(ValueError, match="pose"):
        multi_task_step(model, batches, opt, 1e-3, rngs["label_noise"], rngs["drop_path"])


def test_step_breakdown_has_tasks_plus_total(tiny_model_cfg, tiny_split):
    train, _ = tiny_split
    model = _tiny_model(tiny_model_cfg)
    opt = AdamW(model.params, OptimConfig(), tiny_model_cfg.encoder.depth, 0.85)
    rngs = {p: RngStream(0, p) for p in ("data", "label_noise", "drop_path")}
    batches = sample_task_batches(train, tiny_model_cfg.tasks, 4, rngs["data"])
    bd = multi_task_step(model, batches, opt, 1e-3, rngs["label_noise"], rngs["drop_path"])
    assert len(bd) == len(tiny_model_cfg.tasks) + 1
    assert "total" in bd


def test_single_task_total_is_weighted_loss(tiny_encoder, tiny_split):
    from qface.tasks import TaskSpec

    train, _ = tiny_split
    cfg = ModelConfig(encoder=tiny_encoder, tasks=(TaskSpec("expression", "single_label", 7,
                                                            loss_weight=2.5),),
                      decoder_heads=2)
    model = QFace.build(cfg, seed=0)
    opt = AdamW(model.params, OptimConfig(), cfg.encoder.depth, 1.0)
    rngs = {p: RngStream(0, p) for p in ("data", "label_noise", "drop_path")}
    batches = sample_task_batches(train, cfg.tasks, 4, rngs["data"])
    bd = multi_task_step(model, batches, opt, 0.0, rngs["label_noise"], rngs["drop_path"])
    assert abs(bd["total"] - 2.5 * bd["expression"]) < 1e-6


def test_doubling_alpha_doubles_contribution_and_gradient(tiny_encoder, tiny_split):
    from qface.tasks import TaskSpec

    train, _ = tiny_split
    grads = {}
    for alpha in (1.0, 2.0):
        cfg = ModelConfig(
            encoder=dataclasses.replace(tiny_encoder, drop_path_rate=0.0),
            tasks=(TaskSpec("expression", "single_label", 7, loss_weight=alpha),),
            decoder_heads=2)
        model = QFace.build(cfg, seed=3)
        cast_params(model.params, np.float64)
        idx = np.arange(4)
        z, _ = model.forward(train.batch_images(idx))
        s, e = model.slices["expression"]
        loss = task_loss(cfg.tasks[0], z[:, s:e], train.batch_labels(idx, "expression"))
        backward(loss * alpha)
        grads[alpha] = model.params["decoder.q"].grad.copy()
    np.testing.assert_allclose(grads[2.0], 2.0 * grads[1.0], rtol=1e-10)


def test_accumulated_gradient_equals_sum_of_per_task_gradients(tiny_model_cfg, tiny_split):
    # float64, eval-style forwards: one backward over the summed loss vs
    # separate per-task backwards
    train, _ = tiny_split
    cfg = ModelConfig(encoder=dataclasses.replace(tiny_model_cfg.encoder, drop_path_rate=0.0),
                      tasks=tiny_model_cfg.tasks, decoder_heads=2)
    model = QFace.build(cfg, seed=4)
    cast_params(model.params, np.float64)
    idx = np.arange(4)
    images = train.batch_images(idx)

    def task_losses():
        z, _ = model.forward(images)
        out = []
        for spec in cfg.tasks:
            s, e = model.slices[spec.name]
            out.append(task_loss(spec, z[:, s:e], train.batch_labels(idx, spec.name)))
        return out

    losses = task_losses()
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    backward(total)
    merged = {n: t.grad.copy() for n, t in model.params.items() if t.grad is not None}

    summed = {}
    for k in range(len(cfg.tasks)):
        for t in model.params.values():
            t.grad = None
        backward(task_losses()[k])
        for n, t in model.params.items():
            if t.grad is not None:
                summed[n] = summed.get(n, 0.0) + t.grad
    for n in merged:
        assert np.max(np.abs(merged[n] - summed.get(n, np.zeros_like(merged[n])))) < 1e-10


def test_duplicated_tasks_symmetric_gradients(tiny_encoder, tiny_split):
    # two tasks of identical shape, identical rows, identical batch: their
    # separate backward passes push identical gradients into shared weights
    from qface.tasks import TaskSpec

    train, _ = tiny_split
    cfg = ModelConfig(
        encoder=dataclasses.replace(tiny_encoder, drop_path_rate=0.0),
        tasks=(TaskSpec("a", "single_label", 7), TaskSpec("b", "single_label", 7)),
        decoder_heads=2)
    model = QFace.build(cfg, seed=5)
    cast_params(model.params, np.float64)
    for name in ("decoder.q", "decoder.q_pos", "heads.w"):
        model.params[name].data[7:14] = model.params[name].data[0:7]
    model.params["heads.b"].data[7:14] = model.params["heads.b"].data[0:7]

    idx = np.arange(4)
    images = train.batch_images(idx)
    labels = train.batch_labels(idx, "expression")
    shared = "encoder.block1.attn.wq"
    grads = {}
    for name in ("a", "b"):
        for t in model.params.values():
            t.grad = None
        z, _ = model.forward(images)
        s, e = model.slices[name]
        backward(task_loss(cfg.tasks[0], z[:, s:e], labels))
        grads[name] = model.params[shared].grad.copy()
    np.testing.assert_allclose(grads["a"], grads["b"], atol=1e-12)


def test_losses_computed_against_consistent_snapshot(tiny_model_cfg, tiny_split):
    # the breakdown must equal losses recomputed with the pre-step parameters
    train, _ = tiny_split
    cfg = ModelConfig(encoder=dataclasses.replace(tiny_model_cfg.encoder, drop_path_rate=0.0),
                      tasks=tiny_model_cfg.tasks, decoder_heads=2)
    model = QFace.build(cfg, seed=6)
    snapshot = {n: t.data.copy() for n, t in model.params.items()}
    opt = AdamW(model.params, OptimConfig(), cfg.encoder.depth, 1.0)
    rngs = {p: RngStream(3, p) for p in ("data", "label_noise", "drop_path")}
    batches = sample_task_batches(train, cfg.tasks, 4, rngs["data"])
    noise_replay = RngStream(3, "label_noise")
    bd = multi_task_step(model, batches, opt, 1e-3, rngs["label_noise"], rngs["drop_path"])

    ref = QFace(cfg, {n: Tensor(v, requires_grad=False) for n, v in snapshot.items()})
    images = np.concatenate([batches[s.name][0] for s in cfg.tasks], axis=0)
    z, _ = ref.forward(images)
    offset = 0
    for spec in cfg.tasks:
        b = batches[spec.name][0].shape[0]
        s, e = ref.slices[spec.name]
        loss = task_loss(spec, z[offset:offset + b, s:e], batches[spec.name][1],
                         rng=noise_replay, training=True)
        assert abs(float(loss.data) - bd[spec.name]) < 1e-6
        offset += b


# --- loops: determinism, resume, evaluation, scores ------------------------------

def _quick_sched(steps=8):
    return ScheduleConfig(peak_lr=1e-3, warmup_steps=2, total_steps=steps, floor_lr=1e-6,
                          layer_decay=0.9, eval_every=0)


def test_finetune_log_byte_identical(tiny_model_cfg, tiny_split, tmp_path):
    train, test = tiny_split
    logs = []
    for run in ("a", "b"):
        model = QFace.build(tiny_model_cfg, seed=7)
        finetune(model, train, test, _quick_sched(), OptimConfig(), 4, 7,
                 tmp_path / run, eval_max_images=8)
        logs.append((tmp_path / run / "train_log.csv").read_bytes())
    assert logs[0] == logs[1]


def test_resume_equals_uninterrupted(tiny_model_cfg, tiny_split, tmp_path):
    train, test = tiny_split
    sched = _quick_sched(10)

    model_full = QFace.build(tiny_model_cfg, seed=8)
    finetune(model_full, train, test, sched, OptimConfig(), 4, 8, tmp_path / "full",
             eval_max_images=8)

    model_half = QFace.build(tiny_model_cfg, seed=8)
    finetune(model_half, train, test, sched, OptimConfig(), 4, 8, tmp_path / "half",
             run_steps=5, eval_max_images=8)
    finetune(model_half, train, test, sched, OptimConfig(), 4, 8, tmp_path / "resumed",
             resume=tmp_path / "half" / "model.ckpt", eval_max_images=8)

    for name, t in model_full.params.items():
        np.testing.assert_array_equal(t.data, model_half.params[name].data, err_msg=name)


def test_evaluate_reports_all_tasks(tiny_model_cfg, tiny_split):
    _, test = tiny_split
    model = _tiny_model(tiny_model_cfg, seed=9)
    metrics = evaluate(model, test, max_images=8)
    assert set(metrics) == {t.name for t in tiny_model_cfg.tasks}
    assert "top1" in metrics["expression"]
    assert "age_mae" in metrics["age_gender"]
    assert "euler_mae" in metrics["pose"]


def test_table7_scores_mapping(tiny_model_cfg):
    metrics = {
        "expression": {"macro_f1": 0.7, "top1": 0.9},
        "attributes": {"macro_f1": 0.6, "mean_accuracy": 0.8},
        "action_units": {"macro_f1": 0.5, "mean_accuracy": 0.7},
        "age_gender": {"age_ccc": -0.2, "age_mae": 30.0},
        "pose": {"euler_ccc": 0.4, "euler_mae": 0.3},
    }
    scores = table7_scores(metrics, tiny_model_cfg.tasks)
    assert scores["expression"] == 0.7
    assert scores["age_gender"] == 0.0  # negative concordance floors at zero
    assert scores["pose"] == 0.4


def test_checkpoint_roundtrip_restores_rng(tiny_model_cfg, tmp_path):
    model = _tiny_model(tiny_model_cfg, seed=10)
    opt = AdamW(model.params, OptimConfig(), tiny_model_cfg.encoder.depth, 0.85)
    rngs = {p: RngStream(10, p) for p in ("data", "label_noise", "drop_path")}
    rngs["data"].integers(0, 5, (3,))
    save_train_checkpoint(tmp_path / "c.ckpt", model, opt, 4, rngs)

    model2 = _tiny_model(tiny_model_cfg, seed=99)
    opt2 = AdamW(model2.params, OptimConfig(), tiny_model_cfg.encoder.depth, 0.85)
    step, rngs2 = restore_train_checkpoint(tmp_path / "c.ckpt", model2, opt2)
    assert step == 4
    assert rngs2["data"].counter == rngs["data"].counter
    for name, t in model.params.items():
        np.testing.assert_array_equal(t.data, model2.params[name].data)
