import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qiseg.config import DEFAULTS, RunConfig, env_key, env_overrides, resolve
from qiseg.errors import ConfigError


def test_defaults_are_typed():
    cfg = RunConfig()
    assert cfg["train.lr0"] == 0.001 and cfg["refine.n_iters"] == 7
    assert cfg["eval.alphas"] == (0.2, 0.4, 0.5, 0.6, 0.8, 0.9)
    assert cfg.seg_config().alpha == 0.8
    assert cfg.refine_config().v == 0.01
    assert cfg.groups() == ((1, 2), (3, 4))


def test_resolution_order(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("# comment\ntrain.lr0=0.5\ntrain.iters=10\nseg.alpha=0.6\n")
    env = {"QISEG_TRAIN_ITERS": "20", "QISEG_SEG_ALPHA": "0.4", "UNRELATED": "x"}
    cfg = resolve(f, {"seg.alpha": "0.2"}, env)
    assert cfg["train.lr0"] == 0.5  # file
    assert cfg["train.iters"] == 20  # env beats file
    assert cfg["seg.alpha"] == 0.2  # flag beats env
    assert env_overrides(env) == {"train.iters": "20", "seg.alpha": "0.4"}
    assert env_key("seg.per_path_threshold") == "QISEG_SEG_PER_PATH_THRESHOLD"


def test_bad_input():
    with pytest.raises(ConfigError, match="unknown config key"):
        RunConfig({"train.lr": 1})
    with pytest.raises(ConfigError, match="cannot parse"):
        RunConfig({"train.iters": "many"})
    with pytest.raises(ConfigError, match="cannot parse"):
        RunConfig({"refine.enabled": "maybe"})
    with pytest.raises(ConfigError, match="expected key=value"):
        RunConfig.from_text("train.lr0 0.1\n")
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.from_file("/nonexistent/config.txt")
    with pytest.raises(ConfigError, match="data.classes"):
        RunConfig({"data.classes": 3}).phantom_config()


def test_text_roundtrip(tmp_path):
    cfg = RunConfig({"seg.paths": "fine", "refine.enabled": "off", "eval.alphas": "0.3,0.7"})
    back = RunConfig.from_file(cfg.write(tmp_path))
    assert back.values == cfg.values
    assert back.to_text() == cfg.to_text()
    assert len(cfg.to_text().splitlines()) == len(DEFAULTS)


def test_fingerprint_ignores_workers():
    base = RunConfig()
    assert base.fingerprint() == RunConfig({"run.workers": 8}).fingerprint()
    assert base.fingerprint() != RunConfig({"seg.a": 10.0}).fingerprint()


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_derived_seeds(root):
    cfg = RunConfig({"run.seed": root})
    names = ["dataset", "split", "train", "eval"]
    seeds = [cfg.derive_seed(n) for n in names]
    assert len(set(seeds)) == len(seeds)
    assert seeds == [RunConfig({"run.seed": root}).derive_seed(n) for n in names]
    assert cfg.train_config().seed == seeds[2]


def test_train_config_carries_knobs():
    cfg = RunConfig({"train.iters": 5, "sv.k": 30, "train.optimizer": "adam"}).train_config()
    assert (cfg.iters, cfg.sv_k, cfg.optimizer) == (5, 30, "adam")
