"""Models, criteria, optimizers, the fit loop, and checkpoints."""

import json
import math

import numpy as np
import pytest

from tyee.config import parse_config
from tyee.dataset import Dataset, Sample, SplitSpec, split
from tyee.errors import (
    CorruptCheckpoint,
    EmptyInput,
    LabelOutOfRange,
    ShapeMismatch,
    StaleCache,
    UnknownComponent,
    VersionMismatch,
)
from tyee.nn import MLPModel, build_model, cross_entropy, mse
from tyee.optim import SGD, Adam, scheduler_lr
from tyee.seeding import rng_state
from tyee.trainer import (
    Task,
    evaluate_split,
    fit,
    init_task,
    load_checkpoint,
    save_checkpoint,
    snapshot_task,
    train_step,
    valid_step,
)


def finite_diff_grads(model, criterion, x, y, h=1e-5):
    """Central-difference loss gradients for every parameter element."""
    grads = []
    for p in model.params:
        flat = p.ravel()
        out = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = criterion(model.forward(x), y)
            flat[i] = orig - h
            lm, _ = criterion(model.forward(x), y)
            flat[i] = orig
            out[i] = (lp - lm) / (2 * h)
        grads.append(out.reshape(p.shape))
    return grads


def max_rel_err(analytic, numeric):
    worst = 0.0
    for a, f in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-4)
        worst = max(worst, float((np.abs(a - f) / denom).max()))
    return worst


class TestForward:
    def test_zero_linear_gives_zero_logits(self):
        model = build_model("linear", 4, 3)
        model.set_params([np.zeros_like(p) for p in model.params])
        out = model.forward(np.ones((2, 4)))
        assert np.array_equal(out, np.zeros((2, 3)))

    def test_identity_mlp_relu(self):
        model = build_model("mlp", 3, 3, hidden=[3], activation="relu")
        eye = np.eye(3)
        model.set_params([eye, np.zeros(3), eye, np.zeros(3)])
        x = np.array([[0.5, 1.0, 2.0]])
        np.testing.assert_array_equal(model.forward(x), x)

    def test_hand_matrix_case(self):
        model = build_model("linear", 2, 2)
        w = np.array([[1.0, 2.0], [3.0, -1.0]])
        b = np.array([0.5, -0.5])
        model.set_params([w, b])
        x = np.array([[2.0, 1.0]])
        expected = x @ w.T + b  # [[4.5, 4.5]]
        np.testing.assert_array_equal(model.forward(x), expected)
        np.testing.assert_array_equal(expected, [[4.5, 4.5]])

    def test_shape_mismatch(self):
        model = build_model("linear", 4, 2)
        with pytest.raises(ShapeMismatch):
            model.forward(np.ones((2, 5)))

    def test_backward_without_forward(self):
        model = build_model("linear", 4, 2)
        with pytest.raises(StaleCache):
            model.backward(np.ones((1, 2)))


class TestCriteria:
    def test_uniform_logits_loss(self):
        loss, _ = cross_entropy(np.zeros((3, 4)), [0, 1, 2])
        assert abs(loss - math.log(4)) < 1e-12

    def test_confident_margin_monotone(self):
        losses = []
        for margin in [1.0, 2.0, 4.0, 8.0, 16.0]:
            logits = np.array([[margin, 0.0]])
            loss, _ = cross_entropy(logits, [0])
            losses.append(loss)
        assert all(a > b for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRange):
            cross_entropy(np.zeros((1, 3)), [3])

    def test_ce_gradient_matches_fd(self):
        rng = np.random.default_rng(0)
        model = build_model("linear", 4, 4, rng=rng)
        eye = np.eye(4)
        model.set_params([eye, np.zeros(4)])  # logits == input
        x = rng.normal(size=(3, 4))
        y = np.array([0, 2, 3])
        _, grad = cross_entropy(model.forward(x), y)
        analytic = model.backward(grad)
        numeric = finite_diff_grads(model, cross_entropy, x, y)
        assert max_rel_err(analytic, numeric) < 1e-6

    def test_mse_values(self):
        loss, grad = mse(np.array([[1.0]]), np.array([[0.0]]))
        assert loss == 1.0
        np.testing.assert_array_equal(grad, [[2.0]])
        loss, grad = mse(np.ones((2, 3)), np.ones((2, 3)))
        assert loss == 0.0
        assert np.array_equal(grad, np.zeros((2, 3)))

    def test_mse_gradient_matches_fd(self):
        rng = np.random.default_rng(1)
        model = build_model("linear", 3, 2, rng=rng)
        x = rng.normal(size=(4, 3))
        y = rng.normal(size=(4, 2))
        _, grad = mse(model.forward(x), y)
        analytic = model.backward(grad)
        numeric = finite_diff_grads(model, mse, x, y)
        assert max_rel_err(analytic, numeric) < 1e-8


class TestBackward:
    @pytest.mark.parametrize("kind,hidden,activation,criterion,make_y", [
        ("linear", [], "relu", cross_entropy, lambda rng, n, d: rng.integers(0, d, n)),
        ("linear", [], "relu", mse, lambda rng, n, d: rng.normal(size=(n, d))),
        ("mlp", [5], "tanh", cross_entropy, lambda rng, n, d: rng.integers(0, d, n)),
        ("mlp", [6, 4], "tanh", mse, lambda rng, n, d: rng.normal(size=(n, d))),
    ])
    def test_gradients_match_finite_differences(self, kind, hidden, activation, criterion, make_y):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            model = build_model(kind, 6, 3, hidden=hidden, activation=activation, rng=rng)
            x = rng.normal(size=(4, 6))
            y = make_y(rng, 4, 3)
            _, grad = criterion(model.forward(x), y)
            analytic = model.backward(grad)
            numeric = finite_diff_grads(model, criterion, x, y)
            assert max_rel_err(analytic, numeric) < 1e-5, f"seed {seed}"

    def test_relu_gradients_away_from_kinks(self):
        checked = 0
        for seed in range(30):
            rng = np.random.default_rng(seed)
            model = build_model("mlp", 5, 2, hidden=[4], activation="relu", rng=rng)
            x = rng.normal(size=(3, 5))
            y = rng.integers(0, 2, 3)
            model.forward(x)
            margin = min(np.abs(z).min() for z in model._cache[1][:-1])
            if margin < 1e-3:
                continue
            _, grad = cross_entropy(model.forward(x), y)
            analytic = model.backward(grad)
            numeric = finite_diff_grads(model, cross_entropy, x, y)
            assert max_rel_err(analytic, numeric) < 1e-5
            checked += 1
        assert checked >= 20

    def test_zero_upstream_gradient(self):
        model = build_model("mlp", 3, 2, hidden=[4], activation="tanh")
        model.forward(np.ones((2, 3)))
        grads = model.backward(np.zeros((2, 2)))
        assert all(np.array_equal(g, np.zeros_like(g)) for g in grads)

    def test_linear_weight_gradient_closed_form(self):
        rng = np.random.default_rng(5)
        model = build_model("linear", 3, 2, rng=rng)
        x = rng.normal(size=(4, 3))
        model.forward(x)
        upstream = rng.normal(size=(4, 2))
        dw, db = model.backward(upstream)
        np.testing.assert_allclose(dw, upstream.T @ x, atol=1e-12)
        np.testing.assert_allclose(db, upstream.sum(axis=0), atol=1e-12)


class TestOptimizers:
    def test_adam_first_step(self):
        w = [np.array([1.0])]
        opt = Adam(lr=0.1)
        opt.step(w, [np.array([4.0])])
        assert abs(w[0][0] - 0.9) < 1e-8

    def test_sgd_plain_step(self):
        w = [np.array([1.0])]
        opt = SGD(lr=0.1)
        opt.step(w, [np.array([2.0])])
        assert w[0][0] == 0.8

    def test_zero_gradient_no_change(self):
        for opt in (SGD(lr=0.1, momentum=0.5), Adam(lr=0.1)):
            w = [np.array([1.0, -2.0])]
            opt.step(w, [np.zeros(2)])
            np.testing.assert_array_equal(w[0], [1.0, -2.0])

    def test_momentum_accumulates(self):
        w = [np.array([0.0])]
        opt = SGD(lr=1.0, momentum=0.5)
        opt.step(w, [np.array([1.0])])   # v=1, w=-1
        opt.step(w, [np.array([1.0])])   # v=1.5, w=-2.5
        assert w[0][0] == -2.5

    def test_weight_decay_coupled(self):
        w = [np.array([2.0])]
        SGD(lr=0.1, weight_decay=0.5).step(w, [np.array([0.0])])
        assert abs(w[0][0] - (2.0 - 0.1 * 0.5 * 2.0)) < 1e-12


class TestScheduler:
    def test_step_schedule(self):
        spec = {"kind": "step", "gamma": 0.1, "step_size": 10}
        assert scheduler_lr(spec, 1.0, 0) == 1.0
        assert abs(scheduler_lr(spec, 1.0, 10) - 0.1) < 1e-12
        assert abs(scheduler_lr(spec, 1.0, 25) - 0.01) < 1e-12

    def test_cosine_endpoints_and_midpoint(self):
        spec = {"kind": "cosine", "t_max": 10, "lr_min": 0.1}
        assert scheduler_lr(spec, 1.0, 0) == 1.0
        assert abs(scheduler_lr(spec, 1.0, 10) - 0.1) < 1e-12
        assert abs(scheduler_lr(spec, 1.0, 5) - 0.55) < 1e-12

    def test_cosine_bounds(self):
        spec = {"kind": "cosine", "t_max": 17, "lr_min": 0.05}
        values = [scheduler_lr(spec, 1.0, e) for e in range(18)]
        assert all(0.05 - 1e-12 <= v <= 1.0 + 1e-12 for v in values)

    def test_none(self):
        assert scheduler_lr({"kind": "none"}, 0.3, 100) == 0.3


def toy_samples(n=48, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        cls = i % 2
        base = 0.75 if cls else -0.75
        samples.append(Sample(
            data=(base + rng.normal(0, 0.25, size=(1, 4))),
            label=cls,
            subject_id=f"s{i % 6}",
            record_id=f"s{i % 6}r{i % 2}",
            window_index=i // 6,
        ))
    return samples


CONFIG_TEMPLATE = """\
common:
  seed: {seed}
  output_dir: {out_dir}
dataset:
  paths: [unused]
  epoch: {{window: 1.0}}
  split: {{mode: by_fraction, fractions: [0.7, 0.3, 0.0], seed: 3}}
model:
  kind: linear
  input_dim: 4
  output_dim: 2
optimizer:
  kind: sgd
  lr: 0.1
task:
  type: classification
  metrics: [accuracy, kappa]
trainer:
  epochs: {epochs}
  batch_size: 8
"""


def make_task(tmp_path, epochs=4, seed=11, dataset=None):
    config = parse_config(CONFIG_TEMPLATE.format(seed=seed, out_dir=tmp_path, epochs=epochs))
    dataset = dataset or Dataset.from_samples(toy_samples())
    parts = split(dataset, SplitSpec("by_fraction", (0.7, 0.3, 0.0), 3))
    return config, init_task(config.data, dataset, parts)


class TestInitTask:
    def test_deterministic_init(self, tmp_path):
        _, a = make_task(tmp_path)
        _, b = make_task(tmp_path)
        for x, y in zip(a.model.params, b.model.params):
            assert np.array_equal(x, y)

    def test_shape_mismatch(self, tmp_path):
        config = parse_config(CONFIG_TEMPLATE.format(seed=1, out_dir=tmp_path, epochs=1))
        config.data["model"]["input_dim"] = 7
        dataset = Dataset.from_samples(toy_samples())
        parts = split(dataset, SplitSpec("by_fraction", (0.7, 0.3, 0.0), 3))
        with pytest.raises(ShapeMismatch):
            init_task(config.data, dataset, parts)

    def test_binary_metric_on_multiclass(self, tmp_path):
        config = parse_config(CONFIG_TEMPLATE.format(seed=1, out_dir=tmp_path, epochs=1))
        config.data["model"]["output_dim"] = 3
        config.data["task"]["metrics"] = ["auroc"]
        dataset = Dataset.from_samples(toy_samples())
        parts = split(dataset, SplitSpec("by_fraction", (0.7, 0.3, 0.0), 3))
        with pytest.raises(UnknownComponent):
            init_task(config.data, dataset, parts)


class TestSteps:
    def test_single_parameter_hand_example(self):
        model = build_model("linear", 1, 1)
        model.set_params([np.array([[1.0]]), np.array([0.0])])
        task = Task(
            model=model, criterion_name="mse", criterion=mse,
            optimizer=SGD(lr=0.5), scheduler={"kind": "none"}, base_lr=0.5,
            task_type="regression", metric_names=("mae",), dataset=None,
            train_indices=[], valid_indices=[],
        )
        loss = train_step(task, (np.array([[1.0]]), np.array([[0.0]])))
        assert loss == 1.0
        assert model.weights[0][0, 0] == 0.0

    def test_loss_decreases_on_quadratic(self):
        model = build_model("linear", 2, 1, rng=np.random.default_rng(0))
        task = Task(
            model=model, criterion_name="mse", criterion=mse,
            optimizer=SGD(lr=0.05), scheduler={"kind": "none"}, base_lr=0.05,
            task_type="regression", metric_names=("mae",), dataset=None,
            train_indices=[], valid_indices=[],
        )
        rng = np.random.default_rng(1)
        x = rng.normal(size=(16, 2))
        y = x @ np.array([[1.5], [-2.0]])
        losses = [train_step(task, (x, y)) for _ in range(10)]
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_empty_batch_no_mutation(self, tmp_path):
        _, task = make_task(tmp_path)
        before = [p.copy() for p in task.model.params]
        with pytest.raises(EmptyInput):
            train_step(task, (np.zeros((0, 4)), np.zeros(0, dtype=int)))
        for p, q in zip(before, task.model.params):
            assert np.array_equal(p, q)

    def test_valid_step_pure_and_argmax(self, tmp_path):
        _, task = make_task(tmp_path)
        x = np.stack([task.dataset[i].data.ravel() for i in task.valid_indices[:4]])
        y = np.array([int(task.dataset[i].label) for i in task.valid_indices[:4]])
        params_before = [p.copy() for p in task.model.params]
        opt_before = json.dumps(task.optimizer.state_meta(), sort_keys=True)
        rng_before = json.dumps(rng_state(task.rng), sort_keys=True)

        preds, loss = valid_step(task, (x, y))

        out = task.model.forward(x)
        task.model.clear_cache()
        np.testing.assert_array_equal(preds, out.argmax(axis=1))
        expected_loss, _ = cross_entropy(out, y)
        assert loss == expected_loss
        for p, q in zip(params_before, task.model.params):
            assert np.array_equal(p, q)
        assert json.dumps(task.optimizer.state_meta(), sort_keys=True) == opt_before
        assert json.dumps(rng_state(task.rng), sort_keys=True) == rng_before


class TestCheckpoints:
    def _trained_task(self, tmp_path, epochs=2):
        _, task = make_task(tmp_path / "run", epochs=epochs)
        fit(task, epochs=epochs, checkpoint_interval=1, out_dir=tmp_path / "run")
        return task

    def test_round_trip_identity(self, tmp_path):
        task = self._trained_task(tmp_path)
        ckpt = snapshot_task(task, epoch=2, best_metric=0.5, best_epoch=1)
        path = tmp_path / "ck.tyck"
        save_checkpoint(ckpt, path)
        back = load_checkpoint(path)
        assert back.epoch == ckpt.epoch
        assert back.best_metric == ckpt.best_metric
        assert back.best_epoch == ckpt.best_epoch
        assert back.rng_state == ckpt.rng_state
        assert back.model_meta == ckpt.model_meta
        assert back.optimizer_meta == ckpt.optimizer_meta
        assert back.scheduler == ckpt.scheduler
        assert len(back.params) == len(ckpt.params)
        for a, b in zip(ckpt.params, back.params):
            assert np.array_equal(a, b)
        for key, arrays in ckpt.optimizer_arrays.items():
            for a, b in zip(arrays, back.optimizer_arrays[key]):
                assert np.array_equal(a, b)

    def test_truncated_file(self, tmp_path):
        task = self._trained_task(tmp_path)
        path = tmp_path / "ck.tyck"
        save_checkpoint(snapshot_task(task, 1, None, None), path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 16])
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(path)

    def test_future_version(self, tmp_path):
        task = self._trained_task(tmp_path)
        path = tmp_path / "ck.tyck"
        save_checkpoint(snapshot_task(task, 1, None, None), path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatch):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "ck.tyck"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(path)


class TestFit:
    def test_identical_runs_identical_history(self, tmp_path):
        _, task_a = make_task(tmp_path / "a", epochs=4)
        fit(task_a, 4, 1, tmp_path / "a")
        _, task_b = make_task(tmp_path / "b", epochs=4)
        fit(task_b, 4, 1, tmp_path / "b")
        assert (tmp_path / "a" / "history.jsonl").read_bytes() == \
               (tmp_path / "b" / "history.jsonl").read_bytes()

    def test_zero_epochs(self, tmp_path):
        _, task = make_task(tmp_path, epochs=0)
        history = fit(task, 0, 1, tmp_path / "out")
        assert history == []

    def test_eval_initial(self, tmp_path):
        _, task = make_task(tmp_path, epochs=0)
        history = fit(task, 0, 1, tmp_path / "out", eval_initial=True)
        assert len(history) == 1 and history[0]["epoch"] == -1

    def test_resume_matches_uninterrupted(self, tmp_path):
        _, one_shot = make_task(tmp_path / "full", epochs=6)
        fit(one_shot, 6, 2, tmp_path / "full")

        _, first = make_task(tmp_path / "frag", epochs=6)
        fit(first, 3, 2, tmp_path / "frag")
        _, second = make_task(tmp_path / "frag", epochs=6)
        fit(second, 6, 2, tmp_path / "frag",
            resume_from=tmp_path / "frag" / "ckpt_last.tyck")

        full = (tmp_path / "full" / "history.jsonl").read_bytes()
        frag = (tmp_path / "frag" / "history.jsonl").read_bytes()
        assert full == frag
        for a, b in zip(one_shot.model.params, second.model.params):
            assert np.array_equal(a, b)

    def test_best_checkpoint_written(self, tmp_path):
        _, task = make_task(tmp_path / "run", epochs=4)
        fit(task, 4, 2, tmp_path / "run")
        assert (tmp_path / "run" / "ckpt_best.tyck").exists()
        assert (tmp_path / "run" / "ckpt_last.tyck").exists()
        assert (tmp_path / "run" / "ckpt_epoch_0002.tyck").exists()
        best = load_checkpoint(tmp_path / "run" / "ckpt_best.tyck")
        assert best.best_epoch is not None

    def test_evaluate_split_empty(self, tmp_path):
        _, task = make_task(tmp_path)
        report, loss = evaluate_split(task, [])
        assert report is None and loss is None
