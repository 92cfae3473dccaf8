import copy
import json

import numpy as np
import pytest

from gridloop import tensor as tl
from gridloop import model as md
from gridloop import microtasks as mt
from gridloop import training as tr
from gridloop.halting import HaltPolicy
from test_model import TINY, tiny_canvas

SMALL = md.ModelConfig(dim=8, n_heads=2, trunk_layers=1, t_train=3, t_max=6,
                       n_task_tokens=4, canvas_height=6, canvas_width=6)


def snapshot(params):
    return {name: t.data.copy() for name, t in params.named()}


def assert_same_params(params, ref):
    for name, t in params.named():
        assert np.array_equal(t.data, ref[name]), name


# ---------------------------------------------------------------------------
# loss


def test_offline_loss_zero_logits_is_log_classes(f64, rng):
    canvas = tiny_canvas(rng)
    logits = tl.Tensor(np.zeros((TINY.n_tokens, TINY.n_classes)))
    loss = tr.offline_loss(logits, canvas, TINY)
    assert abs(loss.item() - np.log(TINY.n_classes)) < 1e-12


def test_offline_loss_vanishes_with_margin(f64, rng):
    canvas = tiny_canvas(rng)
    logits = np.zeros((TINY.n_tokens, TINY.n_classes))
    logits[TINY.n_task_tokens:, :] = -1000.0
    logits[np.arange(TINY.n_task_tokens, TINY.n_tokens), canvas.targets] = 1000.0
    loss = tr.offline_loss(tl.Tensor(logits), canvas, TINY)
    assert loss.item() < 1e-9


def test_offline_loss_matches_direct_oracle(f64, rng):
    canvas = tiny_canvas(rng)
    logits = rng.normal(size=(TINY.n_tokens, TINY.n_classes))
    loss = tr.offline_loss(tl.Tensor(logits), canvas, TINY).item()
    image = logits[TINY.n_task_tokens:]
    direct = 0.0
    for i, target in enumerate(canvas.targets):
        p = np.exp(image[i]) / np.exp(image[i]).sum()
        direct -= np.log(p[target])
    direct /= image.shape[0]
    assert abs(loss - direct) < 1e-10


def test_offline_loss_requires_targets(rng):
    canvas = tiny_canvas(rng, with_target=False)
    logits = tl.Tensor(np.zeros((TINY.n_tokens, TINY.n_classes)))
    with pytest.raises(tr.TrainingError):
        tr.offline_loss(logits, canvas, TINY)


def test_gradient_reaches_first_step_embedding(rng):
    # supervision at the final step only, but BPTT touches every iteration
    params = md.init_params(SMALL, seed=30)
    task = mt.generate_microtask("IDENTITY", 0)
    loss = tr._forward_loss(task, params, SMALL, n_steps=3)
    tl.backward(loss)
    tl.tape().clear()
    assert params.step_embedding.grad is not None
    assert np.any(params.step_embedding.grad[0] != 0.0)


# ---------------------------------------------------------------------------
# optimizer pieces


def test_adamw_single_step_matches_reference(f64):
    config = tr.TrainConfig(learning_rate=0.1, weight_decay=0.01)
    w = tl.Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]), requires_grad=True)
    b = tl.Tensor(np.array([0.3, -0.7]), requires_grad=True)
    w.grad = np.array([[0.2, -0.1], [0.4, 0.0]])
    b.grad = np.array([-0.3, 0.6])
    w0, b0 = w.data.copy(), b.data.copy()
    tr.AdamW([w, b], config).step(config.learning_rate)

    def reference(p, g, decay):
        m = (1 - config.beta1) * g
        v = (1 - config.beta2) * g * g
        mhat = m / (1 - config.beta1)
        vhat = v / (1 - config.beta2)
        update = mhat / (np.sqrt(vhat) + config.eps)
        if decay:
            update = update + config.weight_decay * p
        return p - config.learning_rate * update

    assert np.allclose(w.data, reference(w0, w.grad, decay=True), atol=1e-12)
    assert np.allclose(b.data, reference(b0, b.grad, decay=False), atol=1e-12)


def test_adamw_zero_learning_rate_is_identity(rng):
    config = tr.TrainConfig(learning_rate=0.0)
    t = tl.Tensor(rng.normal(size=(3, 3)).astype(np.float32), requires_grad=True)
    t.grad = rng.normal(size=(3, 3)).astype(np.float32)
    before = t.data.copy()
    tr.AdamW([t], config).step(0.0)
    assert np.array_equal(t.data, before)


def test_cosine_schedule_shape():
    config = tr.TrainConfig(steps=100, warmup_steps=10, learning_rate=1.0)
    rates = [tr.cosine_learning_rate(s, config) for s in range(100)]
    assert rates[0] < rates[5] < rates[9]
    assert abs(rates[9] - 1.0) < 1e-12
    assert all(a >= b for a, b in zip(rates[9:], rates[10:]))
    assert rates[-1] < 0.01


def test_clip_global_norm(rng):
    a = tl.Tensor(np.zeros(3), requires_grad=True)
    b = tl.Tensor(np.zeros(4), requires_grad=True)
    a.grad = np.array([3.0, 0.0, 0.0])
    b.grad = np.array([0.0, 4.0, 0.0, 0.0])
    norm = tr.clip_global_norm([a, b], max_norm=1.0)
    assert abs(norm - 5.0) < 1e-12
    assert abs(np.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum()) - 1.0) < 1e-6
    a.grad = np.array([0.1, 0.0, 0.0])
    b.grad = np.array([0.0, 0.1, 0.0, 0.0])
    tr.clip_global_norm([a, b], max_norm=1.0)
    assert a.grad[0] == pytest.approx(0.1)


# ---------------------------------------------------------------------------
# train_offline


def small_train_config(**kw):
    defaults = dict(t_train=3, batch_size=2, steps=6, learning_rate=1e-3,
                    warmup_steps=2, eval_interval=3, seed=0)
    defaults.update(kw)
    return tr.TrainConfig(**defaults)


def test_train_smoke_and_metrics_layout(tmp_path):
    params = md.init_params(SMALL, seed=31)
    source = tr.MicrotaskSource(("IDENTITY",), base_seed=0)
    eval_tasks = tr.make_microtask_set(("IDENTITY",), 3, base_seed=7000)
    path = tmp_path / "metrics.jsonl"
    metrics = tr.train_offline(source, params, SMALL, small_train_config(),
                               eval_tasks=eval_tasks, metrics_path=path)
    assert [m["step"] for m in metrics] == [3, 6]
    for record in metrics:
        assert record["schema_version"] == tr.METRICS_SCHEMA_VERSION
        assert np.isfinite(record["loss"])
        assert {"pixel_acc", "exact_match", "avg_executed_steps"} <= record.keys()
        assert record["avg_executed_steps"] == SMALL.t_train
    on_disk = [json.loads(line) for line in path.read_text().splitlines()]
    assert on_disk == metrics


def test_train_zero_learning_rate_keeps_params(rng):
    params = md.init_params(SMALL, seed=32)
    before = snapshot(params)
    source = tr.MicrotaskSource(("IDENTITY",), base_seed=0)
    tr.train_offline(source, params, SMALL,
                     small_train_config(learning_rate=0.0, steps=3))
    assert_same_params(params, before)


def test_train_same_seed_reproduces_metrics_bytes(tmp_path):
    logs = []
    for run in range(2):
        params = md.init_params(SMALL, seed=33)
        source = tr.MicrotaskSource(("MIRROR_H",), base_seed=0)
        eval_tasks = tr.make_microtask_set(("MIRROR_H",), 2, base_seed=7000)
        path = tmp_path / f"metrics-{run}.jsonl"
        tr.train_offline(source, params, SMALL, small_train_config(),
                         eval_tasks=eval_tasks, metrics_path=path)
        logs.append(path.read_bytes())
    assert logs[0] == logs[1]


def test_train_divergence_guard(rng):
    params = md.init_params(SMALL, seed=34)
    params.head_w.data[...] = np.nan
    source = tr.MicrotaskSource(("IDENTITY",), base_seed=0)
    with pytest.raises(tr.TrainingError) as err:
        tr.train_offline(source, params, SMALL, small_train_config(steps=1))
    assert "diverged" in str(err.value)


def test_train_rejects_mismatched_unroll():
    params = md.init_params(SMALL, seed=35)
    source = tr.MicrotaskSource(("IDENTITY",), base_seed=0)
    with pytest.raises(tr.TrainingError):
        tr.train_offline(source, params, SMALL, small_train_config(t_train=5))


def test_microtask_source_is_pure():
    source = tr.MicrotaskSource(("IDENTITY", "GRAVITY"), base_seed=40)
    a, b = source(3), source(3)
    assert a.family == b.family == "GRAVITY"
    assert a.seed == b.seed == 43
    for (x, y), (u, v) in zip(a.demos, b.demos):
        assert np.array_equal(x, u) and np.array_equal(y, v)


# ---------------------------------------------------------------------------
# test-time training


def test_ttt_zero_steps_returns_same_object():
    params = md.init_params(SMALL, seed=36)
    task = mt.generate_microtask("IDENTITY", 1)
    out = tr.ttt_adapt(task, params, SMALL, tr.TttConfig(adaptation_steps=0))
    assert out is params


def test_ttt_never_mutates_base_params(rng):
    params = md.init_params(SMALL, seed=37)
    before = snapshot(params)
    task = mt.generate_microtask("MIRROR_H", 2)
    adapted = tr.ttt_adapt(task, params, SMALL,
                           tr.TttConfig(adaptation_steps=2, augmentations_per_demo=1),
                           rng=np.random.default_rng(0))
    assert adapted is not params
    assert_same_params(params, before)
    assert any(not np.array_equal(t.data, before[name])
               for name, t in adapted.named())


def test_ttt_reduces_adaptation_loss_on_most_tasks(rng):
    config = tr.TttConfig(adaptation_steps=4, learning_rate=3e-3,
                          augmentations_per_demo=1)
    improved = 0
    n = 10
    for seed in range(n):
        params = md.init_params(SMALL, seed=seed)
        task = mt.generate_microtask(mt.FAMILIES[seed % len(mt.FAMILIES)], seed)
        view_rng = np.random.default_rng([99, seed])
        views = tr.adaptation_views(task, config, view_rng)

        def batch_loss(p):
            with_loss = 0.0
            for view in views:
                loss = tr._forward_loss(view, p, SMALL, SMALL.t_train)
                with_loss += loss.item() / len(views)
                tl.tape().clear()
            return with_loss

        before = batch_loss(params)
        adapted = tr.ttt_adapt(task, params, SMALL, config,
                               rng=np.random.default_rng([99, seed]))
        if batch_loss(adapted) < before:
            improved += 1
    assert improved >= 0.9 * n


def test_ttt_views_respect_family_equivariance(rng):
    config = tr.TttConfig(adaptation_steps=1, augmentations_per_demo=4)
    task = mt.generate_microtask("GRAVITY", 3)
    views = tr.adaptation_views(task, config, np.random.default_rng(5))
    for view in views:
        for inp, out in view.demos + view.queries:
            assert np.array_equal(out, mt.rule_gravity(inp))


# ---------------------------------------------------------------------------
# evaluation


def test_untrained_model_scores_near_chance(rng):
    params = md.init_params(SMALL, seed=38)
    tasks = tr.make_microtask_set(("IDENTITY",), 6, base_seed=100)
    report = tr.evaluate(tasks, params, SMALL, HaltPolicy(tau=0.0, t_max=2),
                         attempts=1)
    assert report.exact_match <= 0.34
    assert report.n_tasks == 6
    assert report.avg_executed_steps == 2.0


def test_pass_at_2_is_at_least_pass_at_1(rng):
    params = md.init_params(SMALL, seed=39)
    tasks = tr.make_microtask_set(("IDENTITY", "MIRROR_H"), 8, base_seed=200)
    policy = HaltPolicy(tau=0.0, t_max=2)
    one = tr.evaluate(tasks, params, SMALL, policy, attempts=1)
    two = tr.evaluate(tasks, params, SMALL, policy, attempts=2)
    assert two.exact_match >= one.exact_match


def test_avg_steps_never_exceed_cap(rng):
    params = md.init_params(SMALL, seed=40)
    tasks = tr.make_microtask_set(("GRAVITY",), 4, base_seed=300)
    report = tr.evaluate(tasks, params, SMALL, HaltPolicy(tau=2.5, t_max=6))
    assert report.avg_executed_steps <= 6


def test_evaluation_is_order_independent_with_restore(rng):
    params = md.init_params(SMALL, seed=41)
    tasks = tr.make_microtask_set(("IDENTITY", "COLOR_SWAP"), 4, base_seed=400)
    ttt = tr.TttConfig(adaptation_steps=1, augmentations_per_demo=1,
                       restore_after=True)
    policy = HaltPolicy(tau=0.0, t_max=2)
    fwd = tr.evaluate(tasks, params, SMALL, policy, ttt=ttt, seed=7)
    rev = tr.evaluate(list(reversed(tasks)), params, SMALL, policy, ttt=ttt, seed=7)
    by_id_fwd = {r.task_id: (r.solved, r.exit_step, r.pixel_accuracy)
                 for r in fwd.per_task}
    by_id_rev = {r.task_id: (r.solved, r.exit_step, r.pixel_accuracy)
                 for r in rev.per_task}
    assert by_id_fwd == by_id_rev


def test_evaluation_with_restore_leaves_base_untouched(rng):
    params = md.init_params(SMALL, seed=42)
    before = snapshot(params)
    tasks = tr.make_microtask_set(("MIRROR_H",), 3, base_seed=500)
    ttt = tr.TttConfig(adaptation_steps=1, augmentations_per_demo=1)
    tr.evaluate(tasks, params, SMALL, HaltPolicy(tau=0.0, t_max=2), ttt=ttt)
    assert_same_params(params, before)
