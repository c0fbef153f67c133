import numpy as np
import pytest

from modmed.cli import main


def write_config(path, text):
    path.write_text(text)
    return str(path)


def test_synth_train_eval(tmp_path, capsys):
    assert main(["synth", "--task", "shapes", "--n", "10", "--out", str(tmp_path / "d"), "--dims", "32x32"]) == 0
    assert (tmp_path / "d" / "manifest.csv").exists()
    cfg = write_config(tmp_path / "c.yaml", f"""
architecture: h_sem
encoder: {{backbone: conv, channels: 4, num_middle: 1}}
train: {{epochs: 1, batch_size: 4}}
data: {{root: {tmp_path / 'd'}}}
output_dir: {tmp_path / 'run'}
""")
    assert main(["train", "--config", cfg, "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "best_epoch,0" in out and "checkpoint," in out
    assert "seed: 1" in (tmp_path / "run" / "config.yaml").read_text()
    ckpt = str(tmp_path / "run" / "best.pt")
    assert main(["eval", "--checkpoint", ckpt, "--split", "test", "--out", str(tmp_path / "r.csv")]) == 0
    first = capsys.readouterr().out
    assert first.startswith("metric,value") and "dice" in first
    main(["eval", "--checkpoint", ckpt, "--split", "test"])
    assert capsys.readouterr().out == first
    assert (tmp_path / "r.csv").read_text().splitlines()[-1].startswith("mean,")


def test_sample_command(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", f"""
architecture: ddpm
encoder: {{backbone: conv, channels: 4, num_middle: 1}}
diffusion: {{T: 10, sample_steps: 3}}
train: {{epochs: 1}}
data: {{synthetic_n: 5, synthetic_dims: [16, 16]}}
output_dir: {tmp_path / 'run'}
""")
    assert main(["train", "--config", cfg]) == 0
    out = tmp_path / "s.npy"
    assert main(["sample", "--checkpoint", str(tmp_path / "run" / "best.pt"), "--n", "2", "--ensemble", "2",
                 "--out", str(out)]) == 0
    assert np.load(out).shape == (2, 1, 16, 16)


def test_profile_command(tmp_path, capsys):
    assert main(["profile", "--blocks", "conv,swin", "--layers", "4", "--patch", "16x16", "--iters", "1",
                 "--batch", "1", "--channels", "4", "--out", str(tmp_path / "p.csv")]) == 0
    out = capsys.readouterr().out
    assert "#Params (M)" in out and "Training time (s)" in out
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 3


@pytest.mark.parametrize("argv,message", [
    (["train", "--config", "/nonexistent.yaml"], "No such file"),
    (["synth", "--task", "blobs", "--n", "1", "--out", "x"], "unknown synthetic task"),
    (["profile", "--blocks", "conv", "--layers", "8", "--patch", "16"], "dims"),
])
def test_errors_are_reported(argv, message, capsys):
    assert main(argv) == 2
    assert message in capsys.readouterr().err


def test_config_rule_errors(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", "architecture: ddpm\nhierarchical: true\n")
    assert main(["train", "--config", cfg]) == 2
    assert "not recommended for diffusion" in capsys.readouterr().err
    cfg = write_config(tmp_path / "c.yaml", "optimiser: adam\n")
    assert main(["train", "--config", cfg]) == 2
    assert "unknown key" in capsys.readouterr().err
