import numpy as np
import pytest
from sklearn.base import clone

from nbf_lab import euler, nbf, pod
from nbf_lab import fv_solver as fv
from nbf_lab.autodiff import MlpNetwork, NetworkStack, ZmuvScaler
from nbf_lab.errors import DataError, NumericalError
from nbf_lab.euler import VARIABLES

from conftest import synthetic_set

TINY = dict(basis_hidden=(12, 12), unknowns_hidden=(12, 12))


def constant_net(sizes, value):
    ws = [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
    bs = [np.zeros(o) for o in sizes[1:]]
    bs[-1][:] = value
    return MlpNetwork(sizes, weights=ws, biases=bs)


def identity_scaler(dim):
    return ZmuvScaler.from_stats(np.zeros(dim), np.ones(dim))


def manual_model(points, mean_values, phi_nets, coef_values, n_bf):
    """Model with given basis networks and constant coefficients ``coef_values (4, n_bf)``."""
    basis = nbf.BasisFunctions(NetworkStack(phi_nets), identity_scaler(2), 1.0, n_bf)
    c_nets = [constant_net([1, 3, 1], 0.0) for _ in range(4 * n_bf)]
    unknowns = nbf.Unknowns(NetworkStack(c_nets), identity_scaler(1),
                            np.asarray(coef_values, dtype=float).reshape(-1), np.zeros(4 * n_bf), n_bf)
    return nbf.NbfModel(nbf.MeanField(points, mean_values), basis, unknowns, (10.0, 30.0))


class TestImportanceProbs:
    def test_constant_is_uniform(self):
        np.testing.assert_allclose(nbf.importance_probs(np.full(5, 3.0)), np.full(5, 0.2), rtol=1e-12)

    def test_hand_example(self):
        p = nbf.importance_probs(np.array([1.0, 2.0, 3.0]), mean=2.0)
        np.testing.assert_allclose(p, [0.5, 0.0, 0.5], atol=1e-9)
        assert abs(p.sum() - 1) <= 1e-12

    def test_permutation_equivariant(self):
        rng = np.random.default_rng(0)
        t = rng.normal(size=20)
        perm = rng.permutation(20)
        np.testing.assert_allclose(nbf.importance_probs(t[perm]), nbf.importance_probs(t)[perm], rtol=1e-14)

    def test_rows_independent(self):
        t = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 4.0]])
        p = nbf.importance_probs(t)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-14)
        np.testing.assert_allclose(p[0], nbf.importance_probs(t[0]))


class TestMeanField:
    def test_exact_at_points(self):
        s, _ = synthetic_set([10.0])
        vals = s.field(10.0)
        mf = nbf.MeanField(s.points, vals)
        assert np.array_equal(mf(s.points), vals)

    def test_linear_gradient(self):
        s, _ = synthetic_set([10.0])
        a = np.array([[1.0, 2.0, -1.0, 0.5], [3.0, 0.0, 2.0, -4.0]])
        mf = nbf.MeanField(s.points, s.points @ a)
        g = mf.gradient(s.points[:7] + 0.01)
        np.testing.assert_allclose(g, np.broadcast_to(a.T, (7, 4, 2)), atol=1e-10)


class TestTrainBasis:
    def test_constant_mode_fits(self):
        # a unit-norm constant mode on the 64 x 64 benchmark grid, default training setup
        pts = fv.build_grid(64, 64).points
        n = pts.shape[0]
        mode = np.full((n, 1), 1 / np.sqrt(n))
        bases = {v: pod.SnapshotPOD.from_arrays(np.zeros(n), np.ones(1), mode) for v in VARIABLES}
        res = nbf.train_basis(bases, pts, nbf.TrainConfig())
        assert res.final_mse.max() <= 1e-8
        np.testing.assert_allclose(res.relative_mse, res.final_mse * n, rtol=1e-12)

    def test_deterministic(self, small_set):
        bases = pod.compute_pod(small_set, 3)
        cfg = nbf.TrainConfig(epochs=5, basis_batch=16, **TINY)
        a = nbf.train_basis(bases, small_set.points, cfg)
        b = nbf.train_basis(bases, small_set.points, cfg)
        assert np.array_equal(a.final_mse, b.final_mse)
        assert np.array_equal(a.basis.stack.params, b.basis.stack.params)
        assert a.final_mse.shape == (4, 3)

    def test_nonfinite_names_network(self, small_set):
        bases = pod.compute_pod(small_set, 2)
        bases["v"].modes_[0, 1] = np.nan
        with pytest.raises(NumericalError, match="variable v, mode 1"):
            nbf.train_basis(bases, small_set.points, nbf.TrainConfig(epochs=1, **TINY))


class TestLeastSquares:
    def test_exact_modes_give_projection(self, small_set):
        bases = pod.compute_pod(small_set)
        for var in VARIABLES:
            b = bases[var]
            field = small_set.matrix(var)[:, 2]
            c = nbf.least_squares_coefficients(b.modes_.T, (field - b.mean_)[:, None])[:, 0]
            np.testing.assert_allclose(c, pod.project_coefficients(b, field), atol=1e-8 * np.abs(field).max())

    def test_singular_falls_back_to_min_norm(self):
        rng = np.random.default_rng(2)
        row = rng.normal(size=10)
        phi = np.stack([row, row, rng.normal(size=10)])
        y = rng.normal(size=(10, 2))
        c = nbf.least_squares_coefficients(phi, y)
        np.testing.assert_allclose(c, np.linalg.pinv(phi.T) @ y, rtol=1e-8, atol=1e-10)


class TestPretrain:
    def test_single_snapshot(self):
        s, _ = synthetic_set([12.0])
        bases = pod.compute_pod(s, 1)
        cfg = nbf.TrainConfig(epochs=30, **TINY)
        basis = nbf.train_basis(bases, s.points, cfg).basis
        mean = np.stack([bases[v].mean_ for v in VARIABLES], axis=1)
        res = nbf.pretrain_unknowns(basis, mean, s, nbf.TrainConfig(**TINY))
        assert res.final_loss <= 1e-10

    def test_targets_shape_and_reconstruction(self, small_set):
        bases = pod.compute_pod(small_set)
        cfg = nbf.TrainConfig(epochs=40, basis_batch=16, **TINY)
        basis = nbf.train_basis(bases, small_set.points, cfg).basis
        mean = np.stack([bases[v].mean_ for v in VARIABLES], axis=1)
        targets = nbf.pretrain_targets(basis, mean, small_set)
        assert targets.shape == (5, 4, 5)
        phi = basis.evaluate(small_set.points)
        for d in range(5):
            rec = mean + np.einsum("ij,ijm->mi", targets[d], phi)
            truth = small_set.field(small_set.machs[d])
            # least squares never does worse than the mean alone
            slack = 1e-12 * np.linalg.norm(truth, axis=0)
            assert np.all(np.linalg.norm(rec - truth, axis=0) <= np.linalg.norm(mean - truth, axis=0) + slack)


    def test_reconstruction_near_least_squares_floor(self):
        # default C networks and schedule: fitted coefficients reconstruct the
        # training snapshots within 2x of the least-squares coefficients;
        # one mode and uneven Machs so the floor is not zero
        small_set, _ = synthetic_set([10.0, 11.0, 13.0, 17.0, 25.0])
        bases = pod.compute_pod(small_set, 1)
        basis = nbf.train_basis(bases, small_set.points,
                                nbf.TrainConfig(epochs=40, basis_batch=16, **TINY)).basis
        mean = np.stack([bases[v].mean_ for v in VARIABLES], axis=1)
        res = nbf.pretrain_unknowns(basis, mean, small_set, nbf.TrainConfig())
        phi = basis.evaluate(small_set.points)
        fitted = res.unknowns.evaluate(small_set.machs)
        for d, mach in enumerate(small_set.machs):
            truth = small_set.field(mach)
            floor = np.linalg.norm(mean + np.einsum("ij,ijm->mi", res.targets[d], phi) - truth, axis=0)
            err = np.linalg.norm(mean + np.einsum("ij,ijm->mi", fitted[d], phi) - truth, axis=0)
            assert np.all(err <= 2.0 * floor + 1e-12 * np.linalg.norm(truth, axis=0)), (mach, err / floor)


class TestPredict:
    def setup_method(self):
        self.set, _ = synthetic_set([10.0, 20.0])
        self.pts = self.set.points
        self.mean = self.set.field(10.0)

    def test_zero_coefficients_give_mean(self):
        rng = np.random.default_rng(3)
        nets = [MlpNetwork([2, 5, 1], seed=int(rng.integers(100))) for _ in range(8)]
        model = manual_model(self.pts, self.mean, nets, np.zeros((4, 2)), 2)
        out, info = nbf.nbf_predict(model, self.pts, 15.0)
        assert np.array_equal(out, self.mean)
        assert info["extrapolated"] is False

    def test_constant_basis(self):
        nets = [constant_net([2, 4, 1], 2.5) for _ in range(4)]
        model = manual_model(self.pts, self.mean, nets, np.ones((4, 1)), 1)
        out, _ = nbf.nbf_predict(model, self.pts, 12.0)
        np.testing.assert_allclose(out, self.mean + 2.5, rtol=1e-15)

    def test_two_mode_brute_force(self):
        rng = np.random.default_rng(4)
        nets = [MlpNetwork([2, 6, 6, 1], seed=k) for k in range(8)]
        coef = rng.normal(size=(4, 2))
        model = manual_model(self.pts, self.mean, nets, coef, 2)
        out, _ = nbf.nbf_predict(model, self.pts, 12.0)
        expected = self.mean.copy()
        for i in range(4):
            for j in range(2):
                expected[:, i] += coef[i, j] * nets[i * 2 + j].forward(self.pts)[:, 0]
        np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12 * np.abs(expected).max())

    def test_linear_in_coefficients(self):
        rng = np.random.default_rng(5)
        nets = [MlpNetwork([2, 6, 1], seed=k) for k in range(12)]
        coef = rng.normal(size=(4, 3))
        one = nbf.nbf_predict(manual_model(self.pts, self.mean, nets, coef, 3), self.pts, 12.0)[0]
        two = nbf.nbf_predict(manual_model(self.pts, self.mean, nets, 2 * coef, 3), self.pts, 12.0)[0]
        np.testing.assert_allclose(two - self.mean, 2 * (one - self.mean), rtol=1e-12, atol=1e-9)

    def test_extrapolation_flag_and_derived(self):
        nets = [constant_net([2, 4, 1], 0.0) for _ in range(4)]
        model = manual_model(self.pts, self.mean, nets, np.zeros((4, 1)), 1)
        out, info = nbf.nbf_predict(model, self.pts, 40.0, derived=True)
        assert info["extrapolated"] is True
        np.testing.assert_allclose(info["pressure"], euler.pressure(out), rtol=1e-14)
        np.testing.assert_allclose(info["mach"], euler.mach_number(out), rtol=1e-12)

    def test_spatial_derivative_matches_fd(self):
        rng = np.random.default_rng(6)
        nets = [MlpNetwork([2, 10, 10, 1], "tanh", seed=k) for k in range(8)]
        coef = rng.normal(size=(4, 2))
        model = manual_model(self.pts, self.mean, nets, coef, 2)
        x = self.pts[::5] + 0.013
        _, dphi = model.basis.evaluate_with_grad(x)
        analytic = np.einsum("ij,ijmd->mid", coef, dphi)
        h = 1e-6
        for d in range(2):
            e = np.zeros(2)
            e[d] = h
            plus = np.einsum("ij,ijm->mi", coef, model.basis.evaluate(x + e))
            minus = np.einsum("ij,ijm->mi", coef, model.basis.evaluate(x - e))
            fd = (plus - minus) / (2 * h)
            assert np.linalg.norm(analytic[..., d] - fd) <= 1e-5 * np.linalg.norm(fd)


def trained_model(snapshots, grid=None, **kw):
    params = dict(epochs=20, basis_batch=16, physics=False, **TINY)
    params.update(kw)
    return nbf.NBFRegressor(grid=grid, **params).fit(snapshots)


class TestPhysics:
    def test_uniform_freestream_has_zero_pde_term(self):
        s, _ = synthetic_set([10.0, 20.0])
        free = np.broadcast_to(euler.freestream_state(10.0), (s.n_points, 4)).copy()
        nets = [MlpNetwork([2, 5, 1], seed=k) for k in range(4)]
        model = manual_model(s.points, free, nets, np.zeros((4, 1)), 1)
        prob = nbf.PhysicsProblem(model, s)
        coef = np.zeros((2, 4, 1))
        _, _, parts = prob.loss_and_grad(coef, np.array([0, 1]), np.arange(s.n_points), (1, 1, 1))
        assert parts["pde"] <= 1e-20

    def test_gradient_matches_fd(self, small_set):
        _, grid = synthetic_set([10.0])
        est = trained_model(small_set, unknowns_hidden=(8, 8), basis_hidden=(8, 8), epochs=10)
        model = est.model_
        prob = nbf.PhysicsProblem(model, small_set, boundary=grid.boundary_faces())
        psi_idx = np.array([1, 3])
        x_idx = np.arange(0, small_set.n_points, 3)
        weights = (1.0, 1.0, 1.0)
        params = model.unknowns.stack.params
        _, grad, _ = nbf.physics_objective(model.unknowns, prob, psi_idx, x_idx, weights)
        rng = np.random.default_rng(7)
        probes = np.concatenate([rng.choice(params.size, 6, replace=False),
                                 [int(np.argmax(np.abs(grad)))]])
        for k in probes:
            old = params[k]
            h = 1e-6 * max(1.0, abs(old))
            params[k] = old + h
            lp = nbf.physics_objective(model.unknowns, prob, psi_idx, x_idx, weights)[0]
            params[k] = old - h
            lm = nbf.physics_objective(model.unknowns, prob, psi_idx, x_idx, weights)[0]
            params[k] = old
            fd = (lp - lm) / (2 * h)
            assert abs(grad[k] - fd) <= 1e-4 * max(abs(fd), 1e-6 * np.abs(grad).max())

    def test_training_reduces_loss_and_keeps_pt(self, small_set):
        _, grid = synthetic_set([10.0])
        est = trained_model(small_set, epochs=30)
        model = est.model_
        prob = nbf.PhysicsProblem(model, small_set, boundary=grid.boundary_faces())
        all_psi, all_x = np.arange(5), np.arange(small_set.n_points)
        before = nbf.physics_objective(model.unknowns, prob, all_psi, all_x, (1, 1, 1))[2]
        cfg = nbf.TrainConfig(physics_epochs=10, physics_x_batch=32, **TINY)
        res = nbf.physics_train_unknowns(model, prob, cfg)
        after = nbf.physics_objective(model.unknowns, prob, all_psi, all_x, (1, 1, 1))[2]
        assert np.all(np.isfinite(res.history)) and len(res.history) == 11
        assert res.history[-1] < res.history[0]
        assert after["pt"] <= 10 * before["pt"]

    def test_pt_guard_keeps_admissible_weights(self, small_set):
        _, grid = synthetic_set([10.0])
        model = trained_model(small_set, epochs=30).model_
        start = model.unknowns.stack.params.copy()
        prob = nbf.PhysicsProblem(model, small_set, boundary=grid.boundary_faces())
        cfg = nbf.TrainConfig(physics_epochs=6, physics_x_batch=32, **TINY)
        res = nbf.physics_train_unknowns(model, prob, cfg, pt_guard=0.0)
        assert res.best_epoch == 0 and np.array_equal(model.unknowns.stack.params, start)
        res = nbf.physics_train_unknowns(model, prob, cfg, pt_guard=1.0)
        coef = nbf._coefficients(model.unknowns, model.unknowns.stack.forward(
            model.unknowns.scaled_inputs(small_set.machs)))
        assert prob.pt_mse(coef) == res.pt_mse[res.best_epoch] <= res.pt_mse[0]

    def test_nonfinite_residual_names_sample(self, small_set):
        est = trained_model(small_set, epochs=2)
        prob = nbf.PhysicsProblem(est.model_, small_set)
        coef = np.full((1, 4, 5), np.nan)
        with pytest.raises(NumericalError, match="Mach 12"):
            prob.loss_and_grad(coef, np.array([1]), np.arange(4), (1, 1, 1))


class TestEstimator:
    def test_fit_predict_and_params(self, small_set):
        est = trained_model(small_set)
        X = np.column_stack([small_set.points, np.full(small_set.n_points, 14.0)])
        pred = est.predict(X)
        assert pred.shape == (small_set.n_points, 4) and np.all(np.isfinite(pred))
        assert est.score(X, small_set.field(14.0)) <= 0
        assert clone(est).get_params()["epochs"] == 20
        assert est.basis_mse_.shape == (4, 5)

    def test_deterministic_with_physics(self, small_set):
        _, grid = synthetic_set([10.0])
        kw = dict(epochs=5, physics=True, physics_epochs=3, physics_x_batch=16)
        a = trained_model(small_set, grid=grid, **kw)
        b = trained_model(small_set, grid=grid, **kw)
        assert np.array_equal(a.model_.unknowns.stack.params, b.model_.unknowns.stack.params)
        assert a.physics_history_ == b.physics_history_


class TestBundles:
    def test_model_round_trip(self, small_set, tmp_path):
        est = trained_model(small_set, epochs=3)
        nbf.save_model(tmp_path / "m", est.model_)
        back = nbf.load_model(tmp_path / "m")
        x = small_set.points[:9] * 1.01
        for mach in (11.0, 17.5):
            assert np.array_equal(nbf.nbf_predict(back, x, mach)[0], nbf.nbf_predict(est.model_, x, mach)[0])
        assert back.mach_range == est.model_.mach_range

    def test_basis_round_trip(self, small_set, tmp_path):
        bases = pod.compute_pod(small_set, 2)
        res = nbf.train_basis(bases, small_set.points, nbf.TrainConfig(epochs=2, **TINY))
        nbf.save_basis(tmp_path, res)
        back = nbf.load_basis(tmp_path)
        assert np.array_equal(back.evaluate(small_set.points), res.basis.evaluate(small_set.points))

    def test_missing_bundle(self, tmp_path):
        with pytest.raises(DataError, match="model bundle not found"):
            nbf.load_model(tmp_path / "nothing")
