"""Error metrics, the Mach-sweep study, the training-size ablation and warm starts.

Reports are plain dataclasses with a ``to_csv`` method; :func:`write_plot_scripts`
emits gnuplot command files that read those CSVs.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import euler, fv_solver, io
from .errors import AccelerationError, DataError, DivergenceError, DomainError, UsageError
from .euler import VARIABLES

log = logging.getLogger(__name__)


def relative_l2(pred, truth):
    """``||pred - truth||_2 / ||truth||_2`` over all entries."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise UsageError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    norm = np.linalg.norm(truth)
    if norm == 0:
        raise DomainError("relative L2 error undefined for a zero reference field")
    return float(np.linalg.norm(pred - truth) / norm)


def as_predictor(model):
    """Return ``f(points, mach) -> (n, 4)`` for an NBF or DeepONet model or estimator.

    Any other callable with that signature is passed through.
    """
    from .deeponet import DeepONetModel, deeponet_forward
    from .nbf import NbfModel, nbf_predict

    if isinstance(model, NbfModel):
        return lambda pts, mach: nbf_predict(model, pts, mach)[0]
    if isinstance(model, DeepONetModel):
        return lambda pts, mach: deeponet_forward(model, pts, mach)
    if hasattr(model, "predict_field"):
        return model.predict_field
    if callable(model):
        return model
    raise UsageError(f"cannot evaluate a {type(model).__name__}")


# ---------------------------------------------------------------- Mach sweep


@dataclass
class ErrorReport:
    """Per-(Mach, variable) relative L2 errors with train/test labels."""

    rows: list  # (psi, variable, split, rel_l2)
    metadata: dict = field(default_factory=dict)

    def errors(self, split=None, variable=None):
        return np.array([r[3] for r in self.rows
                         if (split is None or r[2] == split) and (variable is None or r[1] == variable)])

    def table(self, split):
        """``(machs, errors (n_mach, 4))`` for one split."""
        machs = sorted({r[0] for r in self.rows if r[2] == split})
        lookup = {(r[0], r[1]): r[3] for r in self.rows if r[2] == split}
        return np.array(machs), np.array([[lookup[(m, v)] for v in VARIABLES] for m in machs])

    def to_csv(self, path):
        io.write_csv(path, ("psi", "variable", "split", "rel_l2"), self.rows)


def mach_sweep_eval(model, snapshots, holdout=(25.0,), machs=None, metadata=None):
    """Relative L2 error of ``model`` against every snapshot, per variable.

    Mach numbers in ``holdout`` are labelled ``test`` and the rest ``train``.
    ``machs`` restricts the evaluation; by default every stored Mach is used.
    """
    predict = as_predictor(model)
    holdout = {float(h) for h in holdout}
    machs = snapshots.machs if machs is None else [float(m) for m in machs]
    rows = []
    for mach in machs:
        truth = snapshots.field(mach)
        pred = predict(snapshots.points, mach)
        split = "test" if float(mach) in holdout else "train"
        for i, var in enumerate(VARIABLES):
            rows.append((float(mach), var, split, relative_l2(pred[:, i], truth[:, i])))
    return ErrorReport(rows, dict(metadata or {}))


# ---------------------------------------------------------------- ablation


def spread_subset(machs, size):
    """``size`` values of the sorted list ``machs`` spread evenly from first to last."""
    machs = np.sort(np.asarray(machs, dtype=np.float64))
    if not 1 <= size <= machs.size:
        raise UsageError(f"training size must lie in [1, {machs.size}], got {size}")
    if size == 1:
        return machs[[machs.size // 2]]
    idx = np.unique(np.round(np.linspace(0, machs.size - 1, size)).astype(int))
    return machs[idx]


def train_model(kind, train_set, seed, nbf_params=None, deeponet_params=None):
    """Fit one ``"nbf"`` or ``"deeponet"`` estimator on ``train_set``."""
    from .deeponet import DeepONetRegressor
    from .nbf import NBFRegressor

    if kind == "nbf":
        return NBFRegressor(**{**(nbf_params or {}), "seed": seed}).fit(train_set)
    if kind == "deeponet":
        return DeepONetRegressor(**{**(deeponet_params or {}), "seed": seed}).fit(train_set)
    raise UsageError(f"unknown model kind {kind!r}; expected 'nbf' or 'deeponet'")


def _ablation_cell(args):
    size, seed, kind, snapshots, train_machs, holdout, nbf_params, deeponet_params = args
    train_set = snapshots.subset(train_machs)
    est = train_model(kind, train_set, seed, nbf_params, deeponet_params)
    report = mach_sweep_eval(est, snapshots, holdout, machs=holdout)
    return [(size, seed, kind, r[1], r[3]) for r in report.rows]


@dataclass
class AblationTable:
    rows: list  # (size, seed, model, variable, rel_l2), one per held-out Mach
    train_machs: dict  # size -> training Mach numbers

    def values(self, size, model, variable):
        return np.array([r[4] for r in self.rows if r[0] == size and r[2] == model and r[3] == variable])

    def summary(self):
        """Rows ``(size, model, variable, median, q25, q75)`` over seeds."""
        keys = sorted({(r[0], r[2], r[3]) for r in self.rows},
                      key=lambda k: (k[0], k[1], VARIABLES.index(k[2])))
        out = []
        for size, model, var in keys:
            vals = self.values(size, model, var)
            out.append((size, model, var, float(np.median(vals)),
                        float(np.percentile(vals, 25)), float(np.percentile(vals, 75))))
        return out

    def median(self, size, model, variable):
        return float(np.median(self.values(size, model, variable)))

    def to_csv(self, path, summary_path=None):
        io.write_csv(path, ("size", "seed", "model", "variable", "rel_l2"), self.rows)
        if summary_path is not None:
            io.write_csv(summary_path, ("size", "model", "variable", "median", "q25", "q75"),
                         self.summary())


def ablation(snapshots, sizes=(5, 8, 11, 14, 17, 20), seeds=(0, 1, 2), kinds=("nbf", "deeponet"),
             holdout=(25.0,), nbf_params=None, deeponet_params=None, jobs=1):
    """Held-out errors of each model kind versus training-set size.

    For every size the training Mach numbers are spread evenly over the
    non-held-out snapshots, so the subset depends on the size only; seeds
    vary network initialization and sampling.  Cells run in ``jobs``
    processes and are collected in a fixed order.
    """
    holdout = [float(h) for h in holdout]
    for h in holdout:
        snapshots.field(h)  # raises DataError when missing
    available = [m for m in snapshots.machs if float(m) not in holdout]
    subsets = {int(s): spread_subset(available, int(s)) for s in sizes}
    cells = [(size, int(seed), kind, snapshots, subsets[size], holdout, nbf_params, deeponet_params)
             for size in subsets for seed in seeds for kind in kinds]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_ablation_cell, cells))
    else:
        parts = [_ablation_cell(c) for c in cells]
    rows = [row for part in parts for row in part]
    return AblationTable(rows, {k: v.tolist() for k, v in subsets.items()})


# ---------------------------------------------------------------- warm starts


@dataclass
class AccelReport:
    mach: float
    freestream: fv_solver.ResidualHistory
    nbf: fv_solver.ResidualHistory | None
    config_digest: str
    truth: fv_solver.ResidualHistory | None = None

    @staticmethod
    def _iters(history):
        if history is None or history.converged_iter is None:
            return None
        return history.converged_iter

    @property
    def freestream_iters(self):
        return self._iters(self.freestream)

    @property
    def nbf_iters(self):
        return self._iters(self.nbf)

    @property
    def truth_iters(self):
        return self._iters(self.truth)

    @property
    def savings(self):
        if self.freestream_iters is None or self.nbf_iters is None:
            return None
        return self.freestream_iters - self.nbf_iters

    def to_csv(self, path):
        traces = [self.freestream, self.nbf] + ([self.truth] if self.truth is not None else [])
        header = ["iter", "residual_freestream", "residual_nbf"] + (["residual_truth"] if self.truth is not None else [])
        length = max(len(t.residuals) if t is not None else 0 for t in traces)
        rows = []
        for k in range(length):
            row = [k]
            for t in traces:
                row.append(t.residuals[k] if t is not None and k < len(t.residuals) else "")
            rows.append(row)
        io.write_csv(path, header, rows)


def sanitize_initial_state(values, mach, gas=euler.AIR, floor=1e-6):
    """Clip density and pressure of predicted SI states to ``floor`` times freestream."""
    values = np.array(values, dtype=np.float64)
    free = euler.freestream_state(mach, gas)
    rho_min = floor * free[0]
    p_min = floor * float(euler.pressure(free, gas))
    rho = np.maximum(values[:, 0], rho_min)
    p = np.maximum(euler.pressure(values, gas), p_min)
    p = np.where(np.isfinite(p), p, p_min)
    u, v = values[:, 1], values[:, 2]
    energy = p / (gas.gamma - 1.0) + 0.5 * rho * (u * u + v * v)
    return np.stack([rho, u, v, energy], axis=1)


def accelerate(model, mach, grid, cfg, truth=None):
    """Compare freestream and surrogate initialization of :func:`solve_steady`.

    Both runs use ``cfg`` unchanged and converge against the freestream
    run's reference residual, so they stop at the same absolute residual.
    ``truth``, when given, adds a third run started from that field.
    """
    mach = float(mach)
    inner = getattr(model, "model_", model)
    lo, hi = getattr(inner, "mach_range", (-np.inf, np.inf))
    if not lo <= mach <= hi:
        raise UsageError(f"Mach {mach} outside the trained range [{lo}, {hi}]")
    predict = as_predictor(model)
    report = AccelReport(mach, None, None, cfg.digest())
    try:
        fs = fv_solver.solve_steady(fv_solver.freestream_field(grid, mach), grid, cfg, mach)
        report.freestream = fs.history
        ref = fs.history.reference
        init = sanitize_initial_state(predict(grid.points, mach), mach)
        run = fv_solver.solve_steady(init, grid, cfg, mach, reference_residual=ref)
        if run.config_digest != fs.config_digest:
            raise AssertionError("warm-start runs used different solver configurations")
        report.nbf = run.history
        if truth is not None:
            report.truth = fv_solver.solve_steady(truth, grid, cfg, mach, reference_residual=ref).history
    except DivergenceError as err:
        raise AccelerationError(f"warm-start comparison at Mach {mach} diverged: {err}", report) from err
    return report


# ---------------------------------------------------------------- plots


def write_plot_scripts(reports_dir, accel_machs=()):
    """Write gnuplot command files for the CSV reports in ``reports_dir``."""
    reports_dir = Path(reports_dir)
    io.write_text(reports_dir / "errors.gp", "\n".join([
        "set datafile separator ','",
        "set logscale y",
        "set xlabel 'Mach'",
        "set ylabel 'relative L2 error'",
        "set terminal pngcairo size 900,600",
        "set output 'errors.png'",
        "plot " + ", \\\n     ".join(
            f"'errors.csv' using 1:(strcol(2) eq '{v}' ? $4 : 1/0) with linespoints title '{v}'"
            for v in VARIABLES),
        "",
    ]))
    io.write_text(reports_dir / "ablation.gp", "\n".join([
        "set datafile separator ','",
        "set logscale y",
        "set xlabel 'training snapshots'",
        "set ylabel 'held-out relative L2 error'",
        "set terminal pngcairo size 900,600",
        "set output 'ablation.png'",
        "plot " + ", \\\n     ".join(
            f"'ablation_summary.csv' using 1:(strcol(2) eq '{m}' && strcol(3) eq 'rho' ? $4 : 1/0)"
            f":5:6 with yerrorlines title '{m} rho'"
            for m in ("nbf", "deeponet")),
        "",
    ]))
    for mach in accel_machs:
        tag = accel_tag(mach)
        io.write_text(reports_dir / f"accel_{tag}.gp", "\n".join([
            "set datafile separator ','",
            "set logscale y",
            "set xlabel 'iteration'",
            "set ylabel 'residual'",
            "set terminal pngcairo size 900,600",
            f"set output 'accel_{tag}.png'",
            f"plot 'accel_{tag}.csv' using 1:2 with lines title 'freestream', \\",
            f"     'accel_{tag}.csv' using 1:3 with lines title 'NBF'",
            "",
        ]))


def accel_tag(mach):
    return f"{float(mach):g}"


def load_error_report(path):
    rows = io.read_csv(path)
    if not rows:
        raise DataError(f"{path}: empty error report")
    return ErrorReport([(float(r["psi"]), r["variable"], r["split"], float(r["rel_l2"])) for r in rows])
