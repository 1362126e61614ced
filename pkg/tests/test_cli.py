"""Command-line interface: configs, artifacts, reproducibility, guards."""

import json
import os

import pytest

from metroflow import backend
from metroflow.cli import main


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.delenv("METROFLOW_OUT", raising=False)
    monkeypatch.delenv("METROFLOW_SEED", raising=False)
    data = tmp_path / "flows.txt"
    rc = main(
        [
            "make-synthetic",
            "--out",
            str(data),
            "--stations",
            "4",
            "--days",
            "2",
            "--seed",
            "5",
        ]
    )
    assert rc == 0
    return tmp_path, data


def write_config(tmp_path, data, out_name="run", **overrides):
    cfg = {
        "data": str(data),
        "output_dir": str(tmp_path / out_name),
        "seed": 1,
        "window": {"input_steps": 6, "output_steps": 4, "stride": 1},
        "split": {"mode": "ratio", "ratios": [0.6, 0.2, 0.2]},
        "model": {
            "embed_dim": 2,
            "pool_dim": 2,
            "hidden_dim": 4,
            "attn_dim": 4,
            "attn_heads": 2,
            "ffn_dim": 8,
        },
        "training": {"batch_size": 16, "max_epochs": 2, "patience": 5},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    path = tmp_path / f"{out_name}.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


class TestMakeSynthetic:
    def test_writes_loadable_file(self, workspace):
        from metroflow.data import load_flow_file

        _tmp, data = workspace
        ds = load_flow_file(data)
        assert ds.n_stations == 4
        assert ds.n_steps == 2 * 96

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        for path in (a, b):
            assert main(["make-synthetic", "--out", str(path), "--stations", "3",
                         "--days", "1", "--seed", "9"]) == 0
        assert a.read_bytes() == b.read_bytes()


class TestTrain:
    def test_smoke_writes_artifacts(self, workspace, capsys):
        tmp, data = workspace
        cfg = write_config(tmp, data)
        assert main(["train", str(cfg)]) == 0
        out = tmp / "run"
        assert (out / "checkpoint.bin").exists()
        assert (out / "training_log.jsonl").exists()
        report = json.loads((out / "report.json").read_text())
        assert set(report) == {"15min", "30min", "45min", "60min", "agg"}
        log_lines = (out / "training_log.jsonl").read_text().splitlines()
        assert len(log_lines) == 2
        assert {"epoch", "train_loss", "val_mae", "val_rmse", "val_mape", "seconds"} == set(
            json.loads(log_lines[0])
        )

    def test_no_branch_config_rejected(self, workspace, capsys):
        tmp, data = workspace
        cfg = write_config(
            tmp, data, out_name="nobranch",
            model={"use_recurrent": False, "use_attention": False},
        )
        assert main(["train", str(cfg)]) == 1
        assert "branch" in capsys.readouterr().err

    def test_unknown_config_key_rejected(self, workspace, capsys):
        tmp, data = workspace
        path = tmp / "bad.json"
        path.write_text(json.dumps({"data": str(data), "outputdir": "x"}))
        assert main(["train", str(path)]) == 1
        assert "unknown config keys" in capsys.readouterr().err

    def test_missing_files_are_validation_failures(self, tmp_path, capsys):
        assert main(["train", str(tmp_path / "nope.json")]) == 1
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"data": str(tmp_path / "nope.txt"),
                                   "output_dir": str(tmp_path / "o")}))
        assert main(["train", str(cfg)]) == 1
        capsys.readouterr()

    def test_unknown_split_mode_named_in_error(self, workspace, capsys):
        tmp, data = workspace
        cfg = write_config(tmp, data, out_name="sp", split={"mode": "weekly"})
        assert main(["train", str(cfg)]) == 1
        assert "weekly" in capsys.readouterr().err

    def test_same_seed_byte_identical_artifacts(self, workspace):
        tmp, data = workspace
        cfg_a = write_config(tmp, data, out_name="runa")
        cfg_b = write_config(tmp, data, out_name="runb")
        assert main(["train", str(cfg_a)]) == 0
        assert main(["train", str(cfg_b)]) == 0
        ck_a = (tmp / "runa" / "checkpoint.bin").read_bytes()
        ck_b = (tmp / "runb" / "checkpoint.bin").read_bytes()
        assert ck_a == ck_b
        rp_a = (tmp / "runa" / "report.json").read_bytes()
        rp_b = (tmp / "runb" / "report.json").read_bytes()
        assert rp_a == rp_b

    def test_input_file_not_mutated(self, workspace):
        tmp, data = workspace
        before = data.read_bytes()
        cfg = write_config(tmp, data, out_name="mut")
        assert main(["train", str(cfg)]) == 0
        assert data.read_bytes() == before

    def test_env_overrides(self, workspace, monkeypatch):
        tmp, data = workspace
        cfg = write_config(tmp, data, out_name="envrun")
        monkeypatch.setenv("METROFLOW_OUT", str(tmp / "elsewhere"))
        assert main(["train", str(cfg)]) == 0
        assert (tmp / "elsewhere" / "checkpoint.bin").exists()


class TestEval:
    def test_eval_reproduces_train_report(self, workspace, capsys):
        tmp, data = workspace
        cfg = write_config(tmp, data, out_name="ev")
        assert main(["train", str(cfg)]) == 0
        capsys.readouterr()
        ckpt = tmp / "ev" / "checkpoint.bin"
        assert main(["eval", str(cfg), "--checkpoint", str(ckpt)]) == 0
        printed = json.loads(capsys.readouterr().out)
        stored = json.loads((tmp / "ev" / "report.json").read_text())
        assert printed == stored

    def test_registry_mismatch_rejected(self, workspace, capsys):
        tmp, data = workspace
        cfg = write_config(tmp, data, out_name="rm")
        assert main(["train", str(cfg)]) == 0
        other = write_config(
            tmp, data, out_name="rm2", model={"hidden_dim": 8}
        )
        ckpt = tmp / "rm" / "checkpoint.bin"
        assert main(["eval", str(other), "--checkpoint", str(ckpt)]) == 1
        assert "mismatch" in capsys.readouterr().err

    def test_corrupted_checkpoint_names_block(self, workspace, capsys):
        tmp, data = workspace
        cfg = write_config(tmp, data, out_name="cor")
        assert main(["train", str(cfg)]) == 0
        ckpt = tmp / "cor" / "checkpoint.bin"
        raw = ckpt.read_bytes()
        ckpt.write_bytes(raw[:-30])
        assert main(["eval", str(cfg), "--checkpoint", str(ckpt)]) == 1
        assert "fusion.temporal" in capsys.readouterr().err

    def test_ha_baseline_constant_across_horizons(self, workspace, capsys):
        tmp, data = workspace
        cfg = write_config(tmp, data, out_name="ha")
        assert main(["eval", str(cfg), "--baseline", "ha"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["15min"] == report["30min"] == report["45min"] == report["agg"]

    def test_predictions_csv(self, workspace, capsys):
        tmp, data = workspace
        cfg = write_config(tmp, data, out_name="csv")
        assert main(["train", str(cfg)]) == 0
        ckpt = tmp / "csv" / "checkpoint.bin"
        pred_path = tmp / "preds.csv"
        assert main([
            "eval", str(cfg), "--checkpoint", str(ckpt),
            "--predictions", str(pred_path),
        ]) == 0
        lines = pred_path.read_text().splitlines()
        assert lines[0] == "t_origin,horizon_step,station_id,channel,y_true,y_pred"
        first = lines[1].split(",")
        assert first[3] in ("inflow", "outflow")
        assert len(lines) > 100


class TestGradcheck:
    def test_tiny_config_passes(self, workspace, capsys):
        tmp, data = workspace
        cfg = write_config(tmp, data, out_name="gc",
                           window={"input_steps": 3, "output_steps": 2})
        assert main(["gradcheck", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "[ok]" in out and "FAIL" not in out

    def test_broken_backward_detected(self, workspace, capsys, monkeypatch):
        # fault injection: corrupt one backward kernel and expect a failure
        tmp, data = workspace
        cfg = write_config(tmp, data, out_name="gcbad",
                           window={"input_steps": 3, "output_steps": 2})
        real = backend.kernels.tanh_bwd

        def broken(y, g, gx, n):
            real(y, g, gx, n)
            if n:
                gx[0] += 0.5

        monkeypatch.setattr(backend.kernels, "tanh_bwd", broken, raising=True)
        assert main(["gradcheck", str(cfg)]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_oversized_station_count_rejected(self, tmp_path, capsys):
        data = tmp_path / "big.txt"
        assert main(["make-synthetic", "--out", str(data), "--stations", "100",
                     "--days", "1"]) == 0
        cfg = write_config(tmp_path, data, out_name="big",
                           window={"input_steps": 3, "output_steps": 2})
        assert main(["gradcheck", str(cfg)]) == 1
        assert "limited to 8 stations" in capsys.readouterr().err


class TestExportGraph:
    def test_trained_checkpoint_rows_stochastic(self, workspace, capsys):
        import math

        tmp, data = workspace
        cfg = write_config(tmp, data, out_name="eg")
        assert main(["train", str(cfg)]) == 0
        ckpt = tmp / "eg" / "checkpoint.bin"
        out_csv = tmp / "adj.csv"
        assert main(["export-graph", str(ckpt), "--out", str(out_csv)]) == 0
        rows = [
            [float(v) for v in line.split(",")]
            for line in out_csv.read_text().splitlines()
        ]
        assert len(rows) == 4
        for row in rows:
            assert abs(math.fsum(row) - 1.0) <= 1e-9
            assert all(0.0 <= v <= 1.0 for v in row)

    def test_untrained_checkpoint_still_row_stochastic(self, workspace, tmp_path):
        import math

        from metroflow.model import ForecastModel, ModelConfig, save_checkpoint

        model = ForecastModel(ModelConfig(
            n_stations=4, input_steps=3, output_steps=2, embed_dim=2, pool_dim=2,
            hidden_dim=4, attn_dim=4, attn_heads=2, ffn_dim=8,
        ))
        ckpt = tmp_path / "fresh.ckpt"
        save_checkpoint(ckpt, model)
        out_csv = tmp_path / "fresh_adj.csv"
        assert main(["export-graph", str(ckpt), "--out", str(out_csv)]) == 0
        for line in out_csv.read_text().splitlines():
            row = [float(v) for v in line.split(",")]
            assert abs(math.fsum(row) - 1.0) <= 1e-9

    def test_static_checkpoint_refused(self, tmp_path, capsys):
        from metroflow.model import ForecastModel, ModelConfig, save_checkpoint

        model = ForecastModel(ModelConfig(
            n_stations=4, input_steps=3, output_steps=2, embed_dim=2, pool_dim=2,
            hidden_dim=4, attn_dim=4, attn_heads=2, ffn_dim=8, static_graph=True,
        ))
        ckpt = tmp_path / "static.ckpt"
        save_checkpoint(ckpt, model)
        assert main(["export-graph", str(ckpt), "--out", str(tmp_path / "x.csv")]) == 1
        assert "no learned adjacency" in capsys.readouterr().err
