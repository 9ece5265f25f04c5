"""``nbf-lab`` command line front end.

Artifacts live under ``--out-dir`` in ``data/`` (snapshots), ``bases/``
(POD bases), ``models/`` (network bundles) and ``reports/`` (CSV tables and
gnuplot scripts).  Every command prints one ``status=ok key=value ...``
line on success.  Exit codes: 0 success, 1 usage error, 2 numerical or
data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import deeponet, evaluation, fv_solver, io, nbf, pod
from .errors import DataError, NbfLabError, NumericalError, UsageError
from .euler import VARIABLES

log = logging.getLogger("nbf_lab")

COMMANDS = ("generate-data", "pod", "train-basis", "train-unknowns", "train-deeponet",
            "evaluate", "ablation", "accelerate", "pipeline")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_help()}")


class Workspace:
    """Paths of the standard artifact layout below one root."""

    def __init__(self, root):
        self.root = Path(root)
        self.data = self.root / "data"
        self.bases = self.root / "bases"
        self.models = self.root / "models"
        self.reports = self.root / "reports"

    @property
    def basis_dir(self):
        return self.models / "basis"

    @property
    def nbf_dir(self):
        return self.models / "nbf"

    @property
    def deeponet_dir(self):
        return self.models / "deeponet"

    def snapshot_paths(self, machs):
        paths = [self.data / io.snapshot_name(m) for m in machs]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise DataError(f"snapshot files missing (run generate-data first): {', '.join(missing[:3])}"
                            + (" ..." if len(missing) > 3 else ""))
        return paths


def _summary(command, **fields):
    parts = ["status=ok", f"command={command}"]
    for key, value in fields.items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        parts.append(f"{key}={value}")
    return " ".join(parts)


def _grid(cfg):
    return fv_solver.build_grid(cfg.grid.nr, cfg.grid.ntheta, cfg.grid.r_outer)


def _snapshots(ws, machs):
    return pod.assemble(ws.snapshot_paths(machs))


def _training_set(ws, cfg):
    return _snapshots(ws, cfg.sweep.training_machs())


# ---------------------------------------------------------------- commands


def cmd_generate_data(ws, cfg, args):
    machs = cfg.sweep.machs()
    paths = fv_solver.generate_snapshots(machs, _grid(cfg), cfg.solver, ws.data, jobs=args.jobs)
    return _summary("generate-data", snapshots=len(paths), dir=ws.data)


def cmd_pod(ws, cfg, args):
    train = _training_set(ws, cfg)
    n_bf = train.n_snapshots if cfg.n_bf is None else cfg.n_bf
    bases = pod.compute_pod(train, n_bf)
    pod.save_bases(ws.bases, bases)
    bound = max(pod.truncation_error_bound(b, n_bf) for b in bases.values())
    return _summary("pod", snapshots=train.n_snapshots, n_bf=n_bf, max_tail_bound=bound, dir=ws.bases)


def cmd_train_basis(ws, cfg, args):
    train = _training_set(ws, cfg)
    bases = pod.load_bases(ws.bases)
    if bases["rho"].mean_.size != train.n_points:
        raise DataError("POD bases do not match the snapshot grid; rerun pod")
    result = nbf.train_basis(bases, train.points, cfg.nbf)
    nbf.save_basis(ws.basis_dir, result)
    return _summary("train-basis", networks=result.basis.stack.n_networks,
                    median_mse=float(np.median(result.final_mse)), dir=ws.basis_dir)


def cmd_train_unknowns(ws, cfg, args):
    train = _training_set(ws, cfg)
    bases = pod.load_bases(ws.bases)
    basis = nbf.load_basis(ws.basis_dir)
    mean_values = np.stack([bases[v].mean_ for v in VARIABLES], axis=1)
    stage2 = nbf.pretrain_unknowns(basis, mean_values, train, cfg.nbf)
    model = nbf.NbfModel(nbf.MeanField(train.points, mean_values), basis, stage2.unknowns,
                         (float(train.machs.min()), float(train.machs.max())))
    fields = {"pretrain_loss": stage2.final_loss}
    if cfg.physics and cfg.nbf.physics_epochs > 0:
        problem = nbf.PhysicsProblem(model, train, boundary=_grid(cfg).boundary_faces())
        result = nbf.physics_train_unknowns(model, problem, cfg.nbf)
        io.write_csv(ws.reports / "physics_history.csv",
                     ("epoch", "loss", "pde", "bc", "pt", "pt_train"),
                     [(k, h, p["pde"], p["bc"], p["pt"], q) for k, (h, p, q)
                      in enumerate(zip(result.history, result.parts, result.pt_mse))])
        fields["physics_loss"] = result.history[result.best_epoch]
        fields["physics_best_epoch"] = result.best_epoch
    nbf.save_model(ws.nbf_dir, model)
    return _summary("train-unknowns", **fields, dir=ws.nbf_dir)


def cmd_train_deeponet(ws, cfg, args):
    train = _training_set(ws, cfg)
    d = cfg.deeponet
    result = deeponet.train_deeponet(train, epochs=d.epochs, lr=d.lr,
                                     decay_factor=cfg.nbf.decay_factor,
                                     decay_start_epoch=cfg.nbf.decay_start_epoch,
                                     x_batch=d.x_batch, importance_period=d.importance_period,
                                     latent=d.latent, branch_hidden=d.branch_hidden,
                                     trunk_hidden=d.trunk_hidden, seed=cfg.seed)
    deeponet.save_model(ws.deeponet_dir, result.model)
    return _summary("train-deeponet", train_mse=result.final_mse, dir=ws.deeponet_dir)


def cmd_evaluate(ws, cfg, args):
    model = nbf.load_model(ws.nbf_dir)
    snaps = _snapshots(ws, cfg.sweep.machs())
    meta = {"n_bf": model.n_bf, "train_size": len(cfg.sweep.training_machs()), "seed": cfg.seed}
    report = evaluation.mach_sweep_eval(model, snaps, cfg.sweep.holdout, metadata=meta)
    report.to_csv(ws.reports / "errors.csv")
    fields = {"rows": len(report.rows)}
    for var in VARIABLES:
        fields[f"test_{var}"] = float(np.max(report.errors("test", var)))
    if (ws.deeponet_dir / "manifest.json").exists():
        don = evaluation.mach_sweep_eval(deeponet.load_model(ws.deeponet_dir), snaps, cfg.sweep.holdout)
        don.to_csv(ws.reports / "errors_deeponet.csv")
    evaluation.write_plot_scripts(ws.reports)
    return _summary("evaluate", **fields, csv=ws.reports / "errors.csv")


def cmd_ablation(ws, cfg, args):
    snaps = _snapshots(ws, cfg.sweep.machs())
    seeds = [cfg.seed + s for s in cfg.ablation_seeds]
    table = evaluation.ablation(snaps, cfg.ablation_sizes, seeds, holdout=cfg.sweep.holdout,
                                nbf_params={**cfg.nbf_params(), "grid": _grid(cfg)},
                                deeponet_params=cfg.deeponet_params(),
                                jobs=args.jobs)
    table.to_csv(ws.reports / "ablation.csv", ws.reports / "ablation_summary.csv")
    evaluation.write_plot_scripts(ws.reports)
    smallest = min(cfg.ablation_sizes)
    fields = {f"median_{kind}_rho_{smallest}": table.median(smallest, kind, "rho")
              for kind in ("nbf", "deeponet")}
    return _summary("ablation", rows=len(table.rows), **fields, csv=ws.reports / "ablation.csv")


def cmd_accelerate(ws, cfg, args):
    model = nbf.load_model(ws.nbf_dir)
    grid = _grid(cfg)
    fields = {}
    for mach in cfg.accelerate_machs:
        report = evaluation.accelerate(model, mach, grid, cfg.solver)
        tag = evaluation.accel_tag(mach)
        report.to_csv(ws.reports / f"accel_{tag}.csv")
        fields[f"iters_freestream_{tag}"] = report.freestream_iters
        fields[f"iters_nbf_{tag}"] = report.nbf_iters
        fields[f"savings_{tag}"] = report.savings
    evaluation.write_plot_scripts(ws.reports, cfg.accelerate_machs)
    return _summary("accelerate", **fields)


def cmd_pipeline(ws, cfg, args):
    for name in COMMANDS[:-1]:
        line = HANDLERS[name](ws, cfg, args)
        print(line, file=sys.stderr)
    return _summary("pipeline", tree=len(io.tree_digest(ws.root)), dir=ws.root)


HANDLERS = {
    "generate-data": cmd_generate_data,
    "pod": cmd_pod,
    "train-basis": cmd_train_basis,
    "train-unknowns": cmd_train_unknowns,
    "train-deeponet": cmd_train_deeponet,
    "evaluate": cmd_evaluate,
    "ablation": cmd_ablation,
    "accelerate": cmd_accelerate,
    "pipeline": cmd_pipeline,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config file (sectioned key = value text)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out-dir", default=".", help="root of data/, bases/, models/, reports/")
    common.add_argument("--force", action="store_true", help="replace differing existing artifacts")
    common.add_argument("--jobs", type=int, default=None, help="worker processes for independent runs")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = _Parser(prog="nbf-lab", description="NBF surrogate workbench for steady 2D Euler flow")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "generate-data": "solve the Mach sweep and write snapshots",
        "pod": "compute per-variable POD bases of the training snapshots",
        "train-basis": "fit the basis networks to the POD modes",
        "train-unknowns": "pretrain and physics-train the coefficient networks",
        "train-deeponet": "train the DeepONet baseline",
        "evaluate": "relative L2 errors over the sweep",
        "ablation": "held-out error versus training-set size",
        "accelerate": "warm-start the solver from the NBF prediction",
        "pipeline": "run every step in order",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"missing command\n\n{parser.format_help()}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
        cfg = config_mod.load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.jobs is None:
            args.jobs = cfg.jobs
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        ws = Workspace(args.out_dir)
        with io.protect_overwrites(not args.force):
            line = HANDLERS[args.command](ws, cfg, args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (NumericalError, DataError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NbfLabError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
