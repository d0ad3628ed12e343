"""Tensor core: forward ops, reverse accumulation, Adam, schedule, checkpoints."""

import numpy as np
import pytest

from conftest import fd_param_grads, max_rel_err, make_mlp
from unmix import diffcore as dc
from unmix.errors import ContractError, ShapeError, TrainingError


class TestMlpForward:
    def test_identity_linear_layer(self):
        net = make_mlp([2, 2], ["linear"])
        net.weights[0].data = np.eye(2)
        net.biases[0].data = np.zeros(2)
        out = dc.mlp_forward(net, np.array([1.0, 2.0]))
        np.testing.assert_allclose(out.data, [1.0, 2.0])

    def test_relu_clamps_negatives(self):
        net = make_mlp([2, 2], ["relu"])
        net.weights[0].data = np.eye(2)
        net.biases[0].data = np.zeros(2)
        out = dc.mlp_forward(net, np.array([-1.0, 2.0]))
        np.testing.assert_allclose(out.data, [0.0, 2.0])

    def test_sigmoid_of_zero_is_half(self, rng):
        net = make_mlp([3, 4], ["sigmoid"])
        net.weights[0].data = np.zeros((4, 3))
        net.biases[0].data = np.zeros(4)
        out = dc.mlp_forward(net, rng.standard_normal(3))
        np.testing.assert_allclose(out.data, 0.5)

    def test_shape_mismatch_raises(self):
        net = make_mlp([3, 2], ["linear"])
        with pytest.raises(ShapeError):
            dc.mlp_forward(net, np.zeros(4))

    def test_forward_deterministic(self, rng):
        net = make_mlp([3, 5, 2], ["relu", "linear"], seed=7)
        x = rng.standard_normal(3)
        a = dc.mlp_forward(net, x).data
        b = dc.mlp_forward(net, x).data
        assert np.array_equal(a, b)

    def test_batched_input_matches_per_sample(self, rng):
        net = make_mlp([3, 5, 2], ["relu", "linear"], seed=3)
        X = rng.standard_normal((6, 3))
        batched = dc.mlp_forward(net, X).data
        rows = np.stack([dc.mlp_forward(net, x).data for x in X])
        np.testing.assert_allclose(batched, rows)


class TestBackward:
    def test_sum_of_squares_gradient(self):
        x = dc.parameter(np.array([3.0, 4.0]), "x")
        loss = (x * x).sum()
        grads = dc.backward(loss, {"x": x})
        np.testing.assert_allclose(grads["x"], [6.0, 8.0])

    def test_mlp_matches_finite_differences(self, rng):
        net = make_mlp([4, 6, 3], ["relu", "linear"], seed=11)
        x = rng.standard_normal((5, 4))
        params = net.named_parameters()

        def loss_fn():
            out = dc.mlp_forward(net, x)
            return float((out.data ** 2).sum() + np.sin(out.data).sum())

        out = dc.mlp_forward(net, x)
        loss = (out * out).sum() + _sin(out).sum()
        grads = dc.backward(loss, params)
        assert max_rel_err(grads, fd_param_grads(loss_fn, params)) < 1e-4

    def test_unused_parameter_gets_exact_zero(self):
        x = dc.parameter(np.array([1.0, 2.0]), "x")
        unused = dc.parameter(np.array([[5.0]]), "unused")
        loss = (x * x).sum()
        grads = dc.backward(loss, {"x": x, "unused": unused})
        assert np.array_equal(grads["unused"], np.zeros((1, 1)))

    def test_non_scalar_loss_raises(self):
        x = dc.parameter(np.ones(3), "x")
        with pytest.raises(ContractError):
            dc.backward(x * 2.0, {"x": x})

    def test_batch_sum_equals_sum_of_per_sample_grads(self, rng):
        net = make_mlp([3, 4, 1], ["relu", "linear"], seed=5)
        X = rng.standard_normal((4, 3))
        params = net.named_parameters()
        batch = dc.backward(dc.mlp_forward(net, X).sum(), params)
        acc = {k: np.zeros_like(v) for k, v in batch.items()}
        for x in X:
            g = dc.backward(dc.mlp_forward(net, x).sum(), params)
            for k in acc:
                acc[k] += g[k]
        assert max_rel_err(batch, acc) < 1e-12

    def test_shared_operand_accumulates(self):
        x = dc.parameter(np.array([2.0]), "x")
        loss = (x * x + x * 3.0).sum()
        grads = dc.backward(loss, {"x": x})
        np.testing.assert_allclose(grads["x"], [7.0])

    def test_l2norm_gradient_and_zero_subgradient(self, rng):
        w = dc.parameter(rng.standard_normal((3, 2)), "w")
        grads = dc.backward(dc.l2norm(w), {"w": w})
        np.testing.assert_allclose(grads["w"],
                                   w.data / np.linalg.norm(w.data), rtol=1e-12)
        z = dc.parameter(np.zeros(4), "z")
        grads = dc.backward(dc.l2norm(z), {"z": z})
        assert np.array_equal(grads["z"], np.zeros(4))


def _sin(t):
    out = dc.Tensor(np.sin(t.data), (t,))
    out._vjp = lambda g: (g * np.cos(t.data),)
    return out


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = dc.parameter(np.array([1.0, -2.0]), "p")
        state = dc.AdamState.create({"p": p})
        dc.adam_step({"p": p}, {"p": np.zeros(2)}, state, lr=0.01)
        np.testing.assert_allclose(p.data, [1.0, -2.0])
        assert state.step == 1

    def test_first_step_magnitude_is_lr(self):
        p = dc.parameter(np.array(0.0), "p")
        state = dc.AdamState.create({"p": p})
        dc.adam_step({"p": p}, {"p": np.array(1.0)}, state, lr=0.001)
        assert abs(abs(float(p.data)) - 0.001) < 1e-6

    def test_sign_flips_shrink_steps(self):
        # oracle: direct evaluation of the Adam recurrences
        def two_steps(g1, g2, b1=0.9, b2=0.999, eps=1e-8, lr=0.001):
            m = v = 0.0
            vals = []
            for t, g in enumerate((g1, g2), start=1):
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                vals.append(lr * (m / (1 - b1 ** t))
                            / (np.sqrt(v / (1 - b2 ** t)) + eps))
            return vals

        p = dc.parameter(np.array(0.0), "p")
        state = dc.AdamState.create({"p": p})
        dc.adam_step({"p": p}, {"p": np.array(1.0)}, state, lr=0.001)
        x1 = float(p.data)
        dc.adam_step({"p": p}, {"p": np.array(-1.0)}, state, lr=0.001)
        flip_second = abs(float(p.data) - x1)
        const_second = abs(two_steps(1.0, 1.0)[1])
        assert flip_second < const_second
        np.testing.assert_allclose(flip_second, abs(two_steps(1.0, -1.0)[1]),
                                   rtol=1e-12)

    def test_non_finite_gradient_names_parameter(self):
        p = dc.parameter(np.array(0.0), "gen.obs_log_scale")
        state = dc.AdamState.create({"gen.obs_log_scale": p})
        with pytest.raises(TrainingError, match="gen.obs_log_scale"):
            dc.adam_step({"gen.obs_log_scale": p},
                         {"gen.obs_log_scale": np.array(np.nan)}, state, 0.001)


class TestLrSchedule:
    def test_epoch_zero(self):
        assert dc.lr_schedule(0) == 0.001

    def test_epoch_one(self):
        assert abs(dc.lr_schedule(1) - 0.0009) < 1e-15

    def test_frozen_after_epoch_ten(self):
        assert dc.lr_schedule(15) == dc.lr_schedule(10)
        assert abs(dc.lr_schedule(15) - 0.001 * 0.9 ** 10) < 1e-12

    def test_negative_epoch_rejected(self):
        with pytest.raises(ContractError):
            dc.lr_schedule(-1)


class TestCheckpoint:
    def test_roundtrip_exact(self, tmp_path, rng):
        params = {"a.w": dc.parameter(rng.standard_normal((3, 4)), "a.w"),
                  "a.b": dc.parameter(rng.standard_normal(3), "a.b"),
                  "scale": dc.parameter(np.array(-2.5), "scale")}
        meta = {"n_bands": 7, "seed": 3, "epoch": 9}
        base = str(tmp_path / "ckpt")
        dc.save_checkpoint(base, meta, params)
        meta2, arrays = dc.load_checkpoint(base)
        assert meta2 == meta
        for name, t in params.items():
            assert arrays[name].shape == t.data.shape
            assert np.array_equal(arrays[name], t.data)

    def test_load_into_live_params(self, tmp_path, rng):
        net = make_mlp([3, 2], ["linear"], seed=1)
        base = str(tmp_path / "ck")
        dc.save_checkpoint(base, {}, net.named_parameters())
        net2 = make_mlp([3, 2], ["linear"], seed=99)
        _, arrays = dc.load_checkpoint(base)
        dc.load_params_into(net2.named_parameters(), arrays)
        assert np.array_equal(net2.weights[0].data, net.weights[0].data)

    def test_corrupt_manifest_field(self, tmp_path):
        from unmix.errors import BundleError
        p = dc.parameter(np.ones(2), "p")
        base = str(tmp_path / "ck")
        dc.save_checkpoint(base, {}, {"p": p})
        import json
        manifest = json.load(open(base + ".json"))
        manifest["dtype"] = "f32le"
        json.dump(manifest, open(base + ".json", "w"))
        with pytest.raises(BundleError):
            dc.load_checkpoint(base)
