import hashlib
import subprocess
import sys
from pathlib import Path

import pytest

from cyclonekit import cli
from cyclonekit import config as C
from cyclonekit.errors import ContractError

ROOT = Path(__file__).resolve().parents[1]
BASELINES = ROOT / "tests" / "fixtures" / "southern_baselines.csv"

TINY_RUN = f"""
seed = 3

[data]
n_cyclones = 4
hw = 16
duration = 25
test_fraction = 0.25
val_fraction = 0.34

[model]
sat_hw = 16
era5_hw = 16
sat_patch = 4
era5_patch = 4
cond_hidden = 8

[model.encoder]
depth = 1
heads = 2
model_dim = 8
mlp_dim = 16

[model.decoder]
depth = 1
heads = 2
model_dim = 8
mlp_dim = 16

[pretrain]
epochs = 2

[finetune]
variables = ["msw", "track"]
leads = [6, 24]
shared_trunk = true
hidden = 8
bins = 16
track_bins = 8
epochs = 3

[eval]
baselines = ["{BASELINES.as_posix()}"]

[attribution]
steps = 4
n_windows = 1
"""


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def run(*args):
    return cli.main([str(a) for a in args])


def test_defaults_and_echo(tmp_path):
    cfg = C.load(write(tmp_path, "seed = 1\n"))
    assert cfg.pretrain.epochs == 50 and cfg.mask.r_eye == 0.25 and cfg.model.encoder.model_dim == 64
    echo = C.echo(cfg, tmp_path / "out")
    again = C.load(echo)
    assert again == cfg


def test_seed_is_mandatory(tmp_path):
    with pytest.raises(ContractError, match="seed"):
        C.load(write(tmp_path, "[data]\nn_cyclones = 2\n"))


@pytest.mark.parametrize("text", ["seed = 1\nextra = 2\n", "seed = 1\n[data]\nn_cyclone = 2\n",
                                  "seed = 1\n[model.encoder]\nwidth = 3\n", "seed = 1\n[nope]\n"])
def test_unknown_keys_rejected(tmp_path, text):
    with pytest.raises(ContractError, match="unknown config key"):
        C.load(write(tmp_path, text))


def test_type_and_value_checks(tmp_path):
    with pytest.raises(ContractError):
        C.load(write(tmp_path, 'seed = 1\n[pretrain]\nepochs = "many"\n'))
    with pytest.raises(ContractError):
        C.load(write(tmp_path, "seed = 1\n[mask]\nr_eye = 0.9\n"))
    assert C.load(write(tmp_path, "seed = 1\n[pretrain]\nlr = 1\n")).pretrain.lr == 1.0


def test_missing_upstream_artifact(tmp_path, capsys):
    cfg = write(tmp_path, TINY_RUN)
    for stage, upstream in (("pretrain", "synth"), ("finetune", "pretrain"), ("predict", "pretrain")):
        assert run(stage, "--config", cfg, "--out", tmp_path / "out") == 1
        err = capsys.readouterr().err.strip()
        assert len(err.splitlines()) == 1
        assert err.startswith(f"error: {stage}: ") and f"run {upstream} first" in err


def test_bad_config_is_one_line_error(tmp_path, capsys):
    assert run("synth", "--config", write(tmp_path, "seed = 1\nbogus = 1\n"), "--out", tmp_path) == 1
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and "unknown config key bogus" in err


def test_synth_is_byte_identical(tmp_path):
    cfg = write(tmp_path, TINY_RUN)
    assert run("synth", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("synth", "--config", cfg, "--out", tmp_path / "b") == 0
    a, b = digest(tmp_path / "a"), digest(tmp_path / "b")
    assert a == b and any(k.endswith("manifest.json") for k in a)
    assert run("synth", "--config", cfg, "--out", tmp_path / "c", "--seed", "4") == 0
    assert digest(tmp_path / "c") != a


def test_evaluate_with_baselines_only(tmp_path):
    cfg = write(tmp_path, TINY_RUN)
    assert run("evaluate", "--config", cfg, "--out", tmp_path / "out") == 0
    table = (tmp_path / "out" / "evaluate" / "table.csv").read_text().splitlines()
    assert table[1].startswith("SI,HWRF,4.4,5.7,7.4") and len(table) == 7


def test_evaluate_without_anything(tmp_path, capsys):
    cfg = write(tmp_path, "seed = 0\n")
    assert run("evaluate", "--config", cfg, "--out", tmp_path / "out") == 1
    assert "run predict first" in capsys.readouterr().err


def test_full_pipeline(tmp_path):
    cfg = write(tmp_path, TINY_RUN)
    out = tmp_path / "out"
    for stage in cli.STAGES:
        assert run(stage, "--config", cfg, "--out", out) == 0, stage
        assert (out / ("data" if stage == "synth" else stage) / "config.toml").exists()
    long = (out / "evaluate" / "long.csv").read_text().splitlines()
    assert long[0] == "basin,model,variable,lead,year,mae,count"
    assert any(",CycloneMAE,track,24," in line for line in long)
    assert any(",Persistence,msw,6," in line for line in long)
    weights = (out / "attribute" / "weights.csv").read_text().splitlines()
    assert len(weights) == 2 + 16 * 2 * 2  # msw and track, two leads each


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cyclonekit", "predict", "--config", write(tmp_path, "seed = 0\n"),
                           "--out", tmp_path], capture_output=True, text=True)
    assert proc.returncode == 1 and proc.stderr.startswith("error: predict: MissingArtifactError")
