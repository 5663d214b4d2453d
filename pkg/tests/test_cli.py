import numpy as np
import pytest

from vperceiver.cli import main, parse_config_file
from vperceiver.harness import records_from_csv
from vperceiver.model import ConfigError
from vperceiver.train import load_checkpoint

TOY_CONFIG = """\
# toy model
image_size = 8
patch_size = 4
dim = 16
n_queries = 4
n_sa_layers = 1
n_heads = 2
n_classes = 10

steps = 8            # training
batch_size = 4
base_lr = 1e-3
warmup_steps = 2
seed = 3
data_seed = 1
n_per_class = 4
"""


@pytest.fixture()
def config_path(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(TOY_CONFIG)
    return path


@pytest.fixture()
def trained(tmp_path, config_path):
    ckpt = tmp_path / "toy.ckpt"
    code = main(["train", "--config", str(config_path), "--mode", "masking",
                 "--out", str(ckpt)])
    assert code == 0
    return ckpt


class TestConfigParsing:
    def test_parses_both_sections(self, config_path):
        model_kwargs, train_kwargs = parse_config_file(config_path)
        assert model_kwargs["dim"] == 16 and model_kwargs["n_queries"] == 4
        assert train_kwargs["steps"] == 8
        assert train_kwargs["base_lr"] == pytest.approx(1e-3)

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("banana = 3\n")
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_file(path)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("dim 16\n")
        with pytest.raises(ConfigError, match="expected"):
            parse_config_file(path)

    def test_none_value(self, tmp_path):
        path = tmp_path / "ok.cfg"
        path.write_text("warmup_steps = none\n")
        _, train_kwargs = parse_config_file(path)
        assert train_kwargs["warmup_steps"] is None


class TestExitCodes:
    def test_config_error_is_2(self, tmp_path, trained):
        code = main(["eval", "--ckpt", str(trained), "--k", "1",
                     "--threshold", "0.9"])
        assert code == 2

    def test_bad_config_file_is_2(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("nonsense = 1\n")
        code = main(["train", "--config", str(bad), "--out",
                     str(tmp_path / "x.ckpt")])
        assert code == 2

    def test_data_error_is_3(self, tmp_path):
        code = main(["eval", "--ckpt", str(tmp_path / "missing.ckpt"), "--k", "1"])
        assert code == 3

    def test_numeric_error_is_4(self, tmp_path, config_path):
        blowup = tmp_path / "blowup.cfg"
        blowup.write_text(TOY_CONFIG.replace("base_lr = 1e-3", "base_lr = 1e30")
                          .replace("warmup_steps = 2", "warmup_steps = 0"))
        with np.errstate(over="ignore", invalid="ignore"):
            code = main(["train", "--config", str(blowup), "--out",
                         str(tmp_path / "x.ckpt")])
        assert code == 4

    def test_cifar_requires_data_dir(self, tmp_path, config_path):
        cfg = tmp_path / "cifar.cfg"
        cfg.write_text(TOY_CONFIG + "data_kind = cifar10\n"
                       + "image_size = 32\n")
        code = main(["train", "--config", str(cfg), "--out",
                     str(tmp_path / "x.ckpt")])
        assert code == 2


class TestEndToEnd:
    def test_train_writes_checkpoint(self, trained):
        ckpt = load_checkpoint(trained)
        assert ckpt.step == 8
        assert ckpt.model_config.n_queries == 4
        assert ckpt.train_config.mode == "query_masking"

    def test_eval_fixed_k(self, trained, capsys):
        assert main(["eval", "--ckpt", str(trained), "--k", "2"]) == 0
        out = capsys.readouterr().out
        assert "accuracy(k=2" in out

    def test_eval_threshold(self, trained, capsys):
        assert main(["eval", "--ckpt", str(trained), "--threshold", "0.9"]) == 0
        out = capsys.readouterr().out
        assert "queries mean=" in out

    def test_sweep_k(self, trained, tmp_path):
        out_csv = tmp_path / "sweep.csv"
        code = main(["sweep-k", "--ckpt", str(trained), "--k-list", "1,2,4",
                     "--modes", "fixed_k,random_subset", "--repeats", "2",
                     "--out-csv", str(out_csv)])
        assert code == 0
        records = records_from_csv(out_csv)
        assert len(records) == 6
        assert {r.mode for r in records} == {"fixed_k", "random_subset"}

    def test_sweep_dqs(self, trained, tmp_path):
        out_csv = tmp_path / "dqs.csv"
        code = main(["sweep-dqs", "--ckpt", str(trained),
                     "--t-list", "0.8,0.95", "--out-csv", str(out_csv)])
        assert code == 0
        records = records_from_csv(out_csv)
        assert [r.value for r in records] == [0.8, 0.95]
        assert records[0].q_mean <= records[1].q_mean

    def test_profile(self, tmp_path, config_path):
        out_csv = tmp_path / "profile.csv"
        code = main(["profile", "--config", str(config_path),
                     "--k-list", "1,4", "--batch", "4", "--repeats", "3",
                     "--out-csv", str(out_csv)])
        assert code == 0
        lines = out_csv.read_text().strip().splitlines()
        assert lines[0].startswith("k,flops_total")
        assert len(lines) == 3

    def test_export_attn(self, trained, tmp_path):
        prefix = tmp_path / "maps"
        code = main(["export-attn", "--ckpt", str(trained),
                     "--out", str(prefix)])
        assert code == 0
        assert (tmp_path / "maps.csv").is_file()
        assert (tmp_path / "maps.pgm").is_file()

    def test_metrics_stream(self, tmp_path, config_path):
        ckpt = tmp_path / "m.ckpt"
        metrics = tmp_path / "metrics.csv"
        code = main(["train", "--config", str(config_path), "--out", str(ckpt),
                     "--metrics", str(metrics)])
        assert code == 0
        lines = metrics.read_text().strip().splitlines()
        assert lines[0] == "step,loss,lr,k_drawn"
        assert len(lines) == 9

    def test_fixed_q_mode(self, tmp_path, config_path):
        ckpt = tmp_path / "fq.ckpt"
        code = main(["train", "--config", str(config_path), "--mode", "fixed-q",
                     "--fixed-k", "4", "--out", str(ckpt)])
        assert code == 0
        loaded = load_checkpoint(ckpt)
        assert loaded.train_config.mode == "fixed_q"
        assert loaded.train_config.fixed_k == 4
