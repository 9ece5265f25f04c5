import dataclasses

import pytest

from nbf_lab import config
from nbf_lab.errors import UsageError


def test_empty_gives_defaults():
    cfg = config.parse_config("")
    assert cfg == config.PipelineConfig()
    assert cfg.sweep.machs() == [float(m) for m in range(10, 31)]
    assert 25.0 not in cfg.sweep.training_machs() and len(cfg.sweep.training_machs()) == 20
    assert (cfg.nbf.epochs, cfg.nbf.lr, cfg.nbf.decay_factor, cfg.nbf.decay_start_epoch) == (250, 1e-3, 0.9, 70)


def test_text_round_trip():
    cfg = config.PipelineConfig(
        grid=config.GridConfig(nr=16, ntheta=12),
        sweep=config.SweepConfig(mach_min=10, mach_max=14, holdout=(12.0,)),
        nbf=dataclasses.replace(config.PipelineConfig().nbf, basis_hidden=(8, 8), lr=3e-4),
        n_bf=3, physics=False, ablation_sizes=(2, 3), accelerate_machs=(13.0,), jobs=2,
    ).with_seed(9)
    assert config.parse_config(config.config_text(cfg)) == cfg


def test_seed_reaches_training_config():
    cfg = config.parse_config("[run]\nseed = 5\n")
    assert cfg.seed == 5 and cfg.nbf.seed == 5
    assert cfg.with_seed(7).nbf.seed == 7


@pytest.mark.parametrize("text, match", [
    ("[bogus]\na = 1\n", "unknown section"),
    ("[nbf]\nepoch = 3\n", "unknown key"),
    ("[grid]\nnr = many\n", "cannot parse"),
    ("[sweep]\nholdout = 25.5\n", "holdout"),
    ("[nbf]\nlr = -1\n", "lr"),
    ("[run]\njobs = 0\n", "jobs"),
    ("no section header\n", "<config>"),
])
def test_rejects(text, match):
    with pytest.raises(UsageError, match=match):
        config.parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(UsageError, match="not found"):
        config.load_config(tmp_path / "none.ini")
