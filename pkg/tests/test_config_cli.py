import numpy as np
import pytest

from vqplan import cli
from vqplan import config as cfgmod

TINY = [
    "data.scenes=6",
    "vqvae.steps=15", "vqvae.hidden=16", "vqvae.K=8", "vqvae.L=2", "vqvae.D=4", "vqvae.batch_size=16",
    "pixelcnn.steps=15", "pixelcnn.channels=8", "pixelcnn.batch_size=16", "pixelcnn.K=8", "pixelcnn.L=2",
    "filter.steps=2", "filter.items=6", "filter.hidden=8", "filter.batch_size=3", "filter.train_iters=3",
    "evaluate.episodes=1", "evaluate.seeds=[0]", "evaluate.densities=[1.0]", "evaluate.episode_steps=20",
    "evaluate.samples=8", "evaluate.filter_iters=5", "evaluate.sample_sweep=[4]",
]


def _args(wd, *extra):
    out = ["--workdir", str(wd)]
    for s in TINY:
        out += ["--set", s]
    return out + list(extra)


def _pipeline(wd):
    for cmd in (["gen-data"], ["train", "--stage", "vqvae"], ["train", "--stage", "pixelcnn"],
                ["train", "--stage", "filter"], ["evaluate"]):
        assert cli.main(cmd[:1] + _args(wd, *cmd[1:])) == 0, cmd


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    a = tmp_path_factory.mktemp("run_a")
    b = tmp_path_factory.mktemp("run_b")
    _pipeline(a)
    _pipeline(b)
    return a, b


def test_precedence_default_file_set_flag(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("seed: 3\nvqvae:\n  steps: 10\n  lr: 0.5\nfilter:\n  rho: 2.0\n")
    cfg = cfgmod.load_config(str(f), ["vqvae.steps=20", "filter.rho=4.0"], {"vqvae.steps": 30, "seed": None})
    assert cfg["seed"] == 3                  # file beats default, unset flag is ignored
    assert cfg["vqvae"]["lr"] == 0.5
    assert cfg["filter"]["rho"] == 4.0       # --set beats file
    assert cfg["vqvae"]["steps"] == 30       # flag beats --set
    assert cfg["vqvae"]["K"] == cfgmod.DEFAULTS["vqvae"]["K"]


def test_config_errors():
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.load_config(None, ["nonsense.key=1"])
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.load_config(None, ["vqvae.K=1"])
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.load_config(None, ["vqvae.steps"])
    with pytest.raises(FileNotFoundError):
        cfgmod.load_config("/does/not/exist.yaml")


def test_exit_code_bad_paths(tmp_path, capsys):
    assert cli.main(["plot", "--config", str(tmp_path / "missing.yaml")]) == cli.EXIT_PATH
    f = tmp_path / "file"
    f.write_text("x")
    assert cli.main(["gen-data", "--workdir", str(f)]) == cli.EXIT_PATH
    assert cli.main(["gen-data", "--workdir", str(tmp_path / "no" / "such")]) == cli.EXIT_PATH
    assert cli.main(["gen-data", "--set", "vqvae.K=0", "--workdir", str(tmp_path)]) == cli.EXIT_PATH
    assert "error" in capsys.readouterr().err


def test_exit_code_missing_stage(tmp_path):
    assert cli.main(["train", "--stage", "vqvae", "--workdir", str(tmp_path)]) == cli.EXIT_DEPENDENCY
    assert cli.main(["train", "--stage", "pixelcnn", "--workdir", str(tmp_path)]) == cli.EXIT_DEPENDENCY
    assert cli.main(["evaluate", "--workdir", str(tmp_path)]) == cli.EXIT_DEPENDENCY
    (tmp_path / "dataset.bin").write_bytes(b"garbage")
    assert cli.main(["train", "--stage", "vqvae", "--workdir", str(tmp_path)]) == cli.EXIT_DEPENDENCY


def test_pipeline_writes_artifacts(runs):
    wd = runs[0]
    for name in ("dataset.bin", "vqvae.ckpt", "pixelcnn.ckpt", "filter.ckpt", "metrics.csv",
                 "vqvae_loss.csv", "pixelcnn_loss.csv", "filter_loss.csv"):
        assert (wd / name).is_file(), name
    for name in ("collision_rate.svg", "mean_speed.svg", "two_gap_y_d.svg", "two_gap_v_d.svg"):
        assert (wd / "plots" / name).is_file(), name
    first = (wd / "metrics.csv").read_text().splitlines()[0]
    assert first.startswith("# config_hash=") and "version=" in first


def test_pipeline_is_byte_deterministic(runs):
    a, b = runs
    names = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert names == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_sample_sweep_rows(runs):
    rows = cli.read_metrics(runs[0] / "metrics.csv")
    labels = {r["label"]: r for r in rows}
    assert set(labels) == {"full", "full_samples4"}
    assert int(labels["full_samples4"]["samples"]) == 4
    assert float(labels["full_samples4"]["density"]) == 2.5


def test_no_filter_ablation_writes_separate_file(runs):
    wd = runs[0]
    before = (wd / "metrics.csv").read_bytes()
    assert cli.main(["evaluate"] + _args(wd, "--no-filter")) == 0
    assert (wd / "metrics.csv").read_bytes() == before
    rows = cli.read_metrics(wd / "metrics_no_filter.csv")
    assert rows and all(r["use_filter"] == "False" for r in rows)
    (wd / "metrics_no_filter.csv").unlink()


def test_eval_settings_layout():
    ev = dict(cfgmod.DEFAULTS["evaluate"], sample_sweep=[10, 100], iters_sweep=[20], no_filter_densities=[3.0])
    s = cli.eval_settings(ev)
    labels = [x.label for x in s]
    assert labels == ["full"] * 4 + ["no_filter", "full_samples10", "full_samples100", "full_iters20"]
    assert [x.use_filter for x in s if x.label == "no_filter"] == [False]
    assert all(x.filter_iters == 20 for x in s if x.label == "full_iters20")
    abl = cli.eval_settings(ev, no_filter=True)
    assert {x.label for x in abl} == {"no_filter", "no_filter_samples10", "no_filter_samples100"}
    assert not any(x.use_filter for x in abl)


def test_assignment_values_parse_as_yaml():
    assert cfgmod.parse_assignment("evaluate.seeds=[0, 1]") == (["evaluate", "seeds"], [0, 1])
    assert cfgmod.parse_assignment("filter.rho=1e-2") == (["filter", "rho"], 0.01)
    assert np.isclose(cfgmod.parse_assignment("a.b=0.5")[1], 0.5)
