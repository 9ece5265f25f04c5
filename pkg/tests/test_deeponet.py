import numpy as np
import pytest

from nbf_lab import deeponet as don
from nbf_lab.autodiff import MlpNetwork, NetworkStack, ZmuvScaler
from nbf_lab.errors import DataError
from nbf_lab.pod import SnapshotSet

from conftest import synthetic_set

SMALL = dict(branch_hidden=(16, 16), trunk_hidden=(16, 16), latent=8)


def fixed_net(sizes, weights, biases, act):
    return MlpNetwork(sizes, act, weights=[np.asarray(w, float) for w in weights],
                      biases=[np.asarray(b, float) for b in biases])


def identity(dim):
    return ZmuvScaler.from_stats(np.zeros(dim), np.ones(dim))


def random_model(rng, q=5):
    branch = NetworkStack.create([1, 7, q], [int(rng.integers(1000)) for _ in range(4)], "tanh")
    trunk = NetworkStack.create([2, 9, 9, q], [int(rng.integers(1000)) for _ in range(4)], "relu")
    return don.DeepONetModel(branch, trunk, rng.normal(size=4),
                             ZmuvScaler.from_stats([20.0], [5.0]),
                             ZmuvScaler.from_stats([-1.0, 1.0], [1.5, 0.7]),
                             ZmuvScaler.from_stats(rng.normal(size=4), rng.uniform(1, 3, size=4)))


class TestForward:
    def test_identity_example(self):
        branch = NetworkStack([fixed_net([1, 1], [[[0.0]]], [[1.0]], "tanh")] * 4)
        trunk = NetworkStack([fixed_net([2, 1], [[[1.0, 0.0]]], [[0.0]], "relu")] * 4)
        model = don.DeepONetModel(branch, trunk, np.zeros(4), identity(1), identity(2), identity(4))
        x = np.random.default_rng(0).normal(size=(10, 2))
        out = don.deeponet_forward(model, x, 17.0)
        np.testing.assert_array_equal(out, np.repeat(x[:, :1], 4, axis=1))

    def test_zero_branch_gives_bias(self):
        rng = np.random.default_rng(1)
        model = random_model(rng)
        model.branch.params[:] = 0.0
        out = don.deeponet_forward(model, rng.normal(size=(6, 2)), 12.0)
        expected = model.out_scaler.inverse_transform(model.b0[None])
        np.testing.assert_allclose(out, np.repeat(expected, 6, axis=0), rtol=1e-15)

    def test_matches_explicit_sum(self):
        rng = np.random.default_rng(2)
        model = random_model(rng)
        x = rng.normal(size=(8, 2))
        psi = rng.uniform(10, 30, size=8)
        out = don.deeponet_forward(model, x, psi)
        xs = model.x_scaler.transform(x)
        ps = model.psi_scaler.transform(psi[:, None])
        expected = np.empty((8, 4))
        for k in range(4):
            b = model.branch.network(k).forward(ps)
            t = model.trunk.network(k).forward(xs)
            for m in range(8):
                total = model.b0[k]
                for j in range(b.shape[1]):
                    total += b[m, j] * t[m, j]
                expected[m, k] = total * model.out_scaler.scale_[k] + model.out_scaler.mean_[k]
        np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)

    def test_bilinear_in_branch_and_trunk(self):
        rng = np.random.default_rng(3)
        model = random_model(rng)
        x = rng.normal(size=(5, 2))

        def centered():
            out = don.deeponet_forward(model, x, 15.0)
            return (out - model.out_scaler.mean_) / model.out_scaler.scale_ - model.b0

        base = centered()
        model.branch.weights[-1][:] *= 2.0
        model.branch.biases[-1][:] *= 2.0
        model.trunk.weights[-1][:] *= 3.0
        model.trunk.biases[-1][:] *= 3.0
        np.testing.assert_allclose(centered(), 6.0 * base, rtol=1e-12, atol=1e-12)


class TestTraining:
    def test_single_snapshot_memorized(self):
        s, _ = synthetic_set([15.0], nr=20, ntheta=10)
        assert s.n_points == 200
        # 13 steps per epoch: the per-epoch decay leaves ~100 full-rate epochs
        res = don.train_deeponet(s, x_batch=16)
        assert res.final_mse <= 1e-3

    def test_constant_field(self):
        s, _ = synthetic_set([10.0, 20.0])
        data = np.broadcast_to(np.array([1.0, 2.0, 3.0, 4.0])[:, None, None], s.data.shape).copy()
        const = SnapshotSet(s.points, s.machs, data)
        res = don.train_deeponet(const, epochs=100, **SMALL)
        out = don.deeponet_forward(res.model, s.points, 15.0)
        norm = (out - res.model.out_scaler.mean_) / np.maximum(np.abs(res.model.out_scaler.mean_), 1)
        assert np.abs(norm).max() <= 1e-6

    def test_deterministic(self, small_set):
        a = don.train_deeponet(small_set, epochs=4, **SMALL)
        b = don.train_deeponet(small_set, epochs=4, **SMALL)
        assert a.history == b.history
        assert np.array_equal(a.model.trunk.params, b.model.trunk.params)
        assert np.array_equal(a.model.b0, b.model.b0)

    def test_regressor(self, small_set):
        est = don.DeepONetRegressor(epochs=3, **SMALL).fit(small_set)
        X = np.column_stack([small_set.points, np.full(small_set.n_points, 13.0)])
        assert est.predict(X).shape == (small_set.n_points, 4)
        assert est.get_params()["latent"] == 8


class TestBundle:
    def test_round_trip(self, small_set, tmp_path):
        res = don.train_deeponet(small_set, epochs=2, **SMALL)
        don.save_model(tmp_path / "d", res.model)
        back = don.load_model(tmp_path / "d")
        x = small_set.points * 0.97
        assert np.array_equal(don.deeponet_forward(back, x, 11.5), don.deeponet_forward(res.model, x, 11.5))

    def test_missing(self, tmp_path):
        with pytest.raises(DataError, match="model bundle not found"):
            don.load_model(tmp_path)
