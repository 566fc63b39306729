import csv

import numpy as np
import pytest

from diffhcd.cli import ConfigError, RunConfig, format_config, main, parse_config, read_config_file
from diffhcd.raster import RasterImage, read_rsr, write_rsr


def test_train_defaults():
    cfg = parse_config(["train"])
    assert cfg.p_uncond == 0.1 and cfg.n_ddim == 64 and cfg.T == 1024
    assert cfg.training().p_uncond == 0.1 and cfg.inference().n_ddim == 64


def test_omega_out_of_range():
    with pytest.raises(ConfigError, match="omega"):
        parse_config(["change-detect", "--omega", "1.5"])
    assert main(["change-detect", "--pre", "a", "--post", "b", "--out-map", "m", "--omega", "1.5"]) == 2


def test_precedence(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nn_noisy = 4\nn-ddim = 32  # trailing comment\n")
    assert parse_config(["translate", "--config", str(f)]).n_noisy == 4
    cfg = parse_config(["translate", "--config", str(f), "--n-noisy", "2"])
    assert cfg.n_noisy == 2 and cfg.n_ddim == 32


def test_unknown_and_malformed_keys(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("n_noisyy = 4\n")
    with pytest.raises(ConfigError, match="n_noisyy"):
        read_config_file(f)
    f.write_text("just words\n")
    with pytest.raises(ConfigError):
        read_config_file(f)
    f.write_text("n_noisy = four\n")
    with pytest.raises(ConfigError, match="n_noisy"):
        read_config_file(f)


def test_invalid_combinations():
    with pytest.raises(ConfigError):
        parse_config(["translate", "--n-ddim", "4", "--d", "8"])
    with pytest.raises(ConfigError):
        parse_config(["translate", "--color-source", "external"])
    with pytest.raises(SystemExit):
        parse_config(["bogus"])


def test_sidecar_roundtrip(tmp_path):
    cfg = parse_config(["translate", "--n-noisy", "3", "--input", "x.rsr", "--omega-uncond", "0.5"])
    f = tmp_path / "side.cfg"
    f.write_text(format_config(cfg))
    assert parse_config(["translate", "--config", str(f)]) == cfg
    tr = parse_config(["train", "--lr", "0.00025", "--epochs", "3"])
    f.write_text(format_config(tr))
    assert parse_config(["train", "--config", str(f)]) == tr


def test_missing_checkpoint_clean_error(tmp_path, capsys):
    write_rsr(tmp_path / "in.rsr", RasterImage(np.zeros((3, 32, 32))))
    code = main(["translate", "--checkpoint", str(tmp_path / "nope.ck"), "--input", str(tmp_path / "in.rsr"),
                 "--out", str(tmp_path / "out.rsr")])
    assert code != 0
    assert "checkpoint not found" in capsys.readouterr().err
    (tmp_path / "junk.ck").write_bytes(b"not a checkpoint")
    code = main(["translate", "--checkpoint", str(tmp_path / "junk.ck"), "--input", str(tmp_path / "in.rsr"),
                 "--out", str(tmp_path / "out.rsr")])
    assert code != 0 and not (tmp_path / "out.rsr").exists()


def test_required_arguments():
    assert main(["train"]) == 2
    assert main(["metrics", "--a", "x"]) == 2


def test_pipeline_end_to_end(tmp_path):
    d = tmp_path / "data"
    assert main(["synth-gen", "--seed", "7", "--count", "10", "--size", "32", "--changes", "1",
                 "--out-dir", str(d)]) == 0
    assert len(list(d.glob("*_hr.rsr"))) == 10 and (d / "manifest.txt").exists()
    ck = tmp_path / "m.ck"
    assert main(["train", "--data", str(d / "manifest.txt"), "--patch", "16", "--max-steps", "3",
                 "--epochs", "1", "--out-checkpoint", str(ck)]) == 0
    rows = list(csv.reader(open(str(ck) + ".loss.csv")))
    assert rows[0] == ["step", "epoch", "loss", "loss_ddpm", "loss_consist"] and len(rows) == 4
    out = tmp_path / "t.rsr"
    assert main(["translate", "--checkpoint", str(ck), "--input", str(d / "scene_0000_lr.rsr"), "--out", str(out),
                 "--n-noisy", "2", "--n-ddim", "8", "--d", "4", "--patch", "16"]) == 0
    assert read_rsr(out).shape == (3, 32, 32)
    assert parse_config(["translate", "--config", str(out) + ".cfg"]).n_noisy == 2
    roc = tmp_path / "roc.csv"
    assert main(["roc", "--pre", str(d / "scene_0000_hr.rsr"), "--post", str(d / "scene_0000_post.rsr"),
                 "--truth", str(d / "scene_0000_mask.rsr"), "--out-csv", str(roc), "--w-otsu", "15",
                 "--n-min", "4", "--overlay-dir", str(tmp_path / "ov")]) == 0
    assert len(list(csv.reader(open(roc)))) == 102
    assert len(list((tmp_path / "ov").glob("*.png"))) == 101
    cm = tmp_path / "map.rsr"
    assert main(["change-detect", "--pre", str(d / "scene_0000_hr.rsr"), "--post", str(d / "scene_0000_post.rsr"),
                 "--truth", str(d / "scene_0000_mask.rsr"), "--omega", "0.1", "--w-otsu", "15",
                 "--out-map", str(cm), "--out-overlay", str(tmp_path / "ov.png")]) == 0
    assert read_rsr(cm).shape == (1, 32, 32) and (tmp_path / "ov.png").exists()
    assert main(["metrics", "--a", str(d / "scene_0000_hr.rsr"), "--b", str(out), "--patch", "16"]) == 0


def test_runconfig_is_hashable_value():
    assert RunConfig("train") == RunConfig("train")
    assert hash(RunConfig("roc", omega=0.2)) == hash(RunConfig("roc", omega=0.2))
