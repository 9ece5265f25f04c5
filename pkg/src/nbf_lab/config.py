"""Pipeline configuration: a sectioned key/value text file read with :mod:`configparser`.

Every key is optional; a bare or empty file gives the defaults below::

    [grid]      nr, ntheta, r_outer
    [solver]    any SolverConfig field
    [sweep]     mach_min, mach_max, step, holdout (comma separated)
    [nbf]       any TrainConfig field, n_bf (blank: one per training snapshot), physics
    [deeponet]  epochs, lr, x_batch, importance_period, latent, branch_hidden, trunk_hidden
    [ablation]  sizes, seeds
    [accelerate] machs
    [run]       seed, jobs
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import UsageError
from .fv_solver import SolverConfig
from .nbf import TrainConfig


def _floats(text):
    return tuple(float(t) for t in str(text).replace(",", " ").split())


def _ints(text):
    return tuple(int(t) for t in str(text).replace(",", " ").split())


@dataclass(frozen=True)
class GridConfig:
    nr: int = 64
    ntheta: int = 64
    r_outer: float = 4.0


@dataclass(frozen=True)
class SweepConfig:
    mach_min: float = 10.0
    mach_max: float = 30.0
    step: float = 1.0
    holdout: tuple = (25.0,)

    def machs(self):
        n = int(round((self.mach_max - self.mach_min) / self.step)) + 1
        return [round(self.mach_min + k * self.step, 10) for k in range(n)]

    def training_machs(self):
        return [m for m in self.machs() if m not in self.holdout]


@dataclass(frozen=True)
class DeepONetConfig:
    epochs: int = 250
    lr: float = 1e-3
    x_batch: int = 256
    importance_period: int = 4
    latent: int = 64
    branch_hidden: tuple = (120,) * 5
    trunk_hidden: tuple = (120,) * 6


@dataclass(frozen=True)
class PipelineConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    nbf: TrainConfig = field(default_factory=TrainConfig)
    n_bf: int | None = None
    physics: bool = True
    deeponet: DeepONetConfig = field(default_factory=DeepONetConfig)
    ablation_sizes: tuple = (5, 8, 11, 14, 17, 20)
    ablation_seeds: tuple = (0, 1, 2)
    accelerate_machs: tuple = (15.0, 25.0)
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        machs = self.sweep.machs()
        if not all(h in machs for h in self.sweep.holdout):
            raise UsageError(f"holdout {self.sweep.holdout} is not part of the sweep")
        if not self.sweep.training_machs():
            raise UsageError("the sweep leaves no training snapshots")
        if any(m <= 1 for m in machs):
            raise UsageError("sweep Mach numbers must exceed 1")
        if self.jobs < 1:
            raise UsageError("jobs must be at least 1")

    def with_seed(self, seed):
        return dataclasses.replace(self, seed=int(seed),
                                   nbf=dataclasses.replace(self.nbf, seed=int(seed)))

    def nbf_params(self):
        """Keyword arguments for :class:`~nbf_lab.nbf.NBFRegressor` (seed excluded)."""
        c = self.nbf
        return dict(n_bf=self.n_bf, epochs=c.epochs, lr=c.lr, basis_batch=c.basis_batch,
                    unknowns_batch=c.unknowns_batch, physics=self.physics,
                    physics_epochs=c.physics_epochs, physics_psi_batch=c.physics_psi_batch,
                    physics_x_batch=c.physics_x_batch, lambda_pde=c.lambda_pde,
                    lambda_bc=c.lambda_bc, lambda_pt=c.lambda_pt, basis_hidden=c.basis_hidden,
                    unknowns_hidden=c.unknowns_hidden)

    def deeponet_params(self):
        return dataclasses.asdict(self.deeponet)


_SECTIONS = {"grid", "solver", "sweep", "nbf", "deeponet", "ablation", "accelerate", "run"}


def _convert(section, key, text, default):
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[text.strip().lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return _floats(text) if default and isinstance(default[0], float) else _ints(text)
    except (KeyError, ValueError) as err:
        raise UsageError(f"[{section}] {key}: cannot parse {text!r}") from err
    return text


def _section(parser, name, cls, skip=()):
    if not parser.has_section(name):
        return {}
    defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
    out = {}
    for key, text in parser.items(name):
        if key in skip:
            continue
        if key not in defaults:
            raise UsageError(f"unknown key [{name}] {key}")
        out[key] = _convert(name, key, text, defaults[key])
    return out


def parse_config(text, source="<config>"):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as err:
        raise UsageError(f"{source}: {err}") from err
    unknown = set(parser.sections()) - _SECTIONS
    if unknown:
        raise UsageError(f"{source}: unknown section(s) {sorted(unknown)}")
    kwargs = {}
    if parser.has_section("grid"):
        kwargs["grid"] = GridConfig(**_section(parser, "grid", GridConfig))
    if parser.has_section("solver"):
        kwargs["solver"] = SolverConfig(**_section(parser, "solver", SolverConfig))
    if parser.has_section("sweep"):
        sweep = _section(parser, "sweep", SweepConfig)
        kwargs["sweep"] = SweepConfig(**sweep)
    if parser.has_section("nbf"):
        nbf = _section(parser, "nbf", TrainConfig, skip=("n_bf", "physics"))
        kwargs["nbf"] = TrainConfig(**nbf)
        if parser.has_option("nbf", "n_bf"):
            raw = parser.get("nbf", "n_bf").strip()
            kwargs["n_bf"] = None if raw in ("", "none", "None") else _convert("nbf", "n_bf", raw, 0)
        if parser.has_option("nbf", "physics"):
            kwargs["physics"] = _convert("nbf", "physics", parser.get("nbf", "physics"), True)
    if parser.has_section("deeponet"):
        kwargs["deeponet"] = DeepONetConfig(**_section(parser, "deeponet", DeepONetConfig))
    for key, text in (parser.items("ablation") if parser.has_section("ablation") else []):
        if key not in ("sizes", "seeds"):
            raise UsageError(f"unknown key [ablation] {key}")
        kwargs[f"ablation_{key}"] = _ints(text)
    for key, text in (parser.items("accelerate") if parser.has_section("accelerate") else []):
        if key != "machs":
            raise UsageError(f"unknown key [accelerate] {key}")
        kwargs["accelerate_machs"] = _floats(text)
    for key, text in (parser.items("run") if parser.has_section("run") else []):
        if key not in ("seed", "jobs"):
            raise UsageError(f"unknown key [run] {key}")
        kwargs[key] = _convert("run", key, text, 0)
    try:
        cfg = PipelineConfig(**kwargs)
    except TypeError as err:
        raise UsageError(f"{source}: {err}") from err
    return cfg.with_seed(cfg.seed)


def load_config(path=None):
    """Read a config file; ``None`` gives the defaults."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def _fmt(value):
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def config_text(cfg):
    """Render ``cfg`` as config-file text that :func:`parse_config` reads back."""
    lines = []

    def section(name, items):
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_fmt(v)}" for k, v in items)
        lines.append("")

    section("grid", dataclasses.asdict(cfg.grid).items())
    section("solver", dataclasses.asdict(cfg.solver).items())
    section("sweep", dataclasses.asdict(cfg.sweep).items())
    nbf_items = list(dataclasses.asdict(cfg.nbf).items())
    nbf_items += [("n_bf", "" if cfg.n_bf is None else cfg.n_bf), ("physics", cfg.physics)]
    section("nbf", nbf_items)
    section("deeponet", dataclasses.asdict(cfg.deeponet).items())
    section("ablation", [("sizes", cfg.ablation_sizes), ("seeds", cfg.ablation_seeds)])
    section("accelerate", [("machs", cfg.accelerate_machs)])
    section("run", [("seed", cfg.seed), ("jobs", cfg.jobs)])
    return "\n".join(lines)
