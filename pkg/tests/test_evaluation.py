import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nbf_lab import euler, evaluation as ev
from nbf_lab import fv_solver as fv
from nbf_lab import io
from nbf_lab.errors import DataError, DomainError, UsageError
from nbf_lab.euler import VARIABLES

from conftest import synthetic_set

TINY_NBF = dict(epochs=8, basis_batch=16, physics=False, basis_hidden=(8, 8), unknowns_hidden=(8, 8))
TINY_DON = dict(epochs=3, branch_hidden=(8, 8), trunk_hidden=(8, 8), latent=4)


class TestRelativeL2:
    def test_examples(self):
        t = np.array([3.0, -4.0])
        assert ev.relative_l2(t, t) == 0.0
        assert ev.relative_l2(np.zeros(2), t) == 1.0
        assert ev.relative_l2(np.array([1.0, 1.0]), np.array([1.0, 0.0])) == 1.0

    def test_zero_truth(self):
        with pytest.raises(DomainError):
            ev.relative_l2(np.ones(3), np.zeros(3))

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            ev.relative_l2(np.ones(3), np.ones(4))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_triangle_bound(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rng.normal(size=(3, 12))
        bound = (np.linalg.norm(a - b) + np.linalg.norm(b - c)) / np.linalg.norm(c)
        assert ev.relative_l2(a, c) <= bound * (1 + 1e-12)


class TestMachSweep:
    def test_exact_model_has_zero_error(self, small_set):
        report = ev.mach_sweep_eval(lambda pts, m: small_set.field(m), small_set, holdout=[14.0])
        assert len(report.rows) == small_set.n_snapshots * 4
        assert np.all(report.errors() == 0)
        assert {r[0] for r in report.rows if r[2] == "test"} == {14.0}
        machs, table = report.table("train")
        assert machs.tolist() == [10.0, 12.0, 16.0, 18.0] and table.shape == (4, 4)

    def test_missing_snapshot(self, small_set):
        with pytest.raises(DataError):
            ev.mach_sweep_eval(lambda pts, m: small_set.field(10.0), small_set, machs=[11.0])

    def test_csv(self, small_set, tmp_path):
        report = ev.mach_sweep_eval(lambda pts, m: 1.01 * small_set.field(m), small_set)
        report.to_csv(tmp_path / "errors.csv")
        back = ev.load_error_report(tmp_path / "errors.csv")
        assert back.rows == report.rows
        np.testing.assert_allclose(back.errors(), 0.01, rtol=1e-9)


class TestAblation:
    def test_spread_subset(self):
        machs = [m for m in range(10, 31) if m != 25]
        assert ev.spread_subset(machs, 5).tolist() == [10, 15, 20, 24, 30]
        assert ev.spread_subset(machs, 20).tolist() == machs
        with pytest.raises(UsageError):
            ev.spread_subset(machs, 21)

    def test_full_size_matches_sweep_and_seed_order(self):
        snaps, _ = synthetic_set([10.0, 12.0, 14.0, 16.0])
        table = ev.ablation(snaps, sizes=[3], seeds=[0, 1], holdout=[14.0],
                            nbf_params=TINY_NBF, deeponet_params=TINY_DON)
        assert len(table.rows) == 2 * 2 * 4
        est = ev.train_model("nbf", snaps.subset([10.0, 12.0, 16.0]), 1, TINY_NBF)
        sweep = ev.mach_sweep_eval(est, snaps, holdout=[14.0])
        np.testing.assert_array_equal(table.values(3, "nbf", "rho")[1:], sweep.errors("test", "rho"))
        swapped = ev.ablation(snaps, sizes=[3], seeds=[1, 0], holdout=[14.0],
                              nbf_params=TINY_NBF, deeponet_params=TINY_DON)
        assert swapped.summary() == table.summary()

    def test_unknown_kind(self, small_set):
        with pytest.raises(UsageError):
            ev.train_model("pod-nn", small_set, 0)


@pytest.fixture(scope="module")
def converged_small():
    grid = fv.build_grid(16, 16)
    cfg = fv.SolverConfig()
    res = fv.solve_steady(fv.freestream_field(grid, 10.0), grid, cfg, 10.0)
    return grid, cfg, res.field.reshape(-1, 4)


class TestAccelerate:
    def test_orderings_and_csv(self, converged_small, tmp_path):
        grid, cfg, truth = converged_small
        free = fv.freestream_field(grid, 10.0).reshape(-1, 4)
        blend = lambda pts, m: 0.2 * free + 0.8 * truth  # noqa: E731
        report = ev.accelerate(blend, 10.0, grid, cfg, truth=truth)
        assert report.config_digest == cfg.digest()
        assert report.nbf.reference == report.freestream.reference
        assert report.truth_iters <= report.nbf_iters < report.freestream_iters
        assert report.savings == report.freestream_iters - report.nbf_iters
        report.to_csv(tmp_path / "accel_10.csv")
        rows = io.read_csv(tmp_path / "accel_10.csv")
        assert list(rows[0]) == ["iter", "residual_freestream", "residual_nbf", "residual_truth"]
        assert len(rows) == len(report.freestream)

    def test_out_of_range(self, small_set):
        from nbf_lab.nbf import NBFRegressor

        est = NBFRegressor(**{**TINY_NBF, "epochs": 1}).fit(small_set)
        with pytest.raises(UsageError, match="outside"):
            ev.accelerate(est, 25.0, fv.build_grid(4, 4), fv.SolverConfig())

    def test_sanitize(self):
        free = euler.freestream_state(10.0)
        p_inf = float(euler.pressure(free))
        bad = np.array([[-1.0, 5.0, 1.0, 1.0e7], [2.0, 5.0, 1.0, 0.0], free])
        out = ev.sanitize_initial_state(bad, 10.0)
        assert out[0, 0] == pytest.approx(1e-6 * free[0])
        assert out[1, 0] == 2.0
        assert euler.pressure(out[1]) == pytest.approx(1e-6 * p_inf, rel=1e-9)
        assert np.all(euler.pressure(out) >= 1e-6 * p_inf * (1 - 1e-9))
        np.testing.assert_allclose(out[2], free, rtol=1e-14)

def test_plot_scripts(tmp_path):
    ev.write_plot_scripts(tmp_path, [15.0, 25.0])
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["ablation.gp", "accel_15.gp", "accel_25.gp", "errors.gp"]
    assert "accel_25.csv" in (tmp_path / "accel_25.gp").read_text()
    assert all(v in (tmp_path / "errors.gp").read_text() for v in VARIABLES)
