
import numpy as np
import pytest
import torch

from modmed.profiler import HEADINGS, count_parameters, layer_layout, parse_dims, profile


def test_count_parameters_examples():
    assert count_parameters(torch.nn.Linear(4, 2)) == 10
    assert count_parameters(torch.nn.Conv2d(8, 16, 3)) == 16 * 8 * 9 + 16


def test_parse_dims():
    assert parse_dims("32x32x32") == (32, 32, 32)
    assert parse_dims("64X48") == (64, 48)
    for bad in ("32", "axb", "0x4", "2x2x2x2"):
        with pytest.raises(ValueError):
            parse_dims(bad)


def test_layer_layout():
    assert layer_layout(8, 2) == {"blocks_per_stage": 1, "num_middle": 4, "num_final": 0}
    with pytest.raises(ValueError, match="cannot fill"):
        layer_layout(3, 2)


def test_report_rows_and_table(tmp_path):
    report = profile(["conv", "swin"], [4, 6], ["16x16"], iters=1, channels=4)
    assert len(report.rows) == 4
    row = report.row("swin", 6, "16x16")
    assert row.status == "ok" and row.train_time > 0 and row.infer_time > 0
    assert row.memory_source in ("rss", "cuda-reserved")
    table = report.to_table()
    assert all(h in table.splitlines()[0] for h in HEADINGS)
    lines = report.to_csv(tmp_path / "p.csv").read_text().splitlines()
    assert lines[0].split(",")[:4] == ["Block", "Layers", "Patch", "#Params (M)"]
    with pytest.raises(KeyError):
        report.row("mamba", 4, "16x16")


def test_params_linear_in_layers():
    for kind in ("conv", "mamba"):
        report = profile([kind], [8, 16, 32], ["16x16"], iters=1, channels=4)
        x = np.array([8, 16, 32], dtype=float)
        y = np.array([r.params for r in report.rows], dtype=float)
        fit = np.polyfit(x, y, 1)
        resid = y - np.polyval(fit, x)
        r2 = 1 - resid.var() / y.var()
        assert r2 > 0.99


def test_conv_depth_doubling_doubles_params():
    report = profile(["conv"], [16, 32], ["16x16"], iters=1, channels=4)
    ratio = report.rows[1].params / report.rows[0].params
    assert abs(ratio - 2) <= 0.4


def test_memory_gate_row_is_recorded():
    gated = profile(["vit", "conv+msa"], [6], ["64x64"], iters=1, channels=4, max_attention_tokens=8)
    for row in gated.rows:
        assert row.status == "failed: MemoryGateError"
        assert row.params > 0 and row.train_time is None
        assert "n/a" in row.cells()
    ok = profile(["vit"], [6], ["64x64"], iters=1, channels=4)
    assert ok.rows[0].status == "ok" and ok.rows[0].params == gated.rows[0].params


def test_invalid_arguments():
    with pytest.raises(ValueError):
        profile(["conv"], [8], ["16x16"], iters=0)
