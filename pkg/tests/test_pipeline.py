import json
import shutil

import pytest

from sparsesplat.config import ConfigError, config_from_dict, load_config
from sparsesplat.pipeline import ABLATION_ROWS, StageError, run_ablation, run_pipeline

from conftest import tiny_config


def test_full_run_writes_intermediates(tiny_dataset, tmp_path):
    m = run_pipeline(config_from_dict(tiny_config(tiny_dataset, tmp_path / "run")))
    out = tmp_path / "run"
    assert list(m.timings) == ["ingest", "fuse", "mask", "stabilize", "joint", "refine", "eval"]
    assert (out / "fused" / "view2.png").exists() and (out / "masks" / "view2.png").exists()
    assert (out / "matches" / "view2_to0.csv").exists()
    for name in ("scene.ply", "history.csv", "cameras_est.json", "eval.json", "manifest.json", "exposures.json"):
        assert (out / name).exists(), name
    assert m.substitutions == []
    assert {"psnr", "ssim", "ate_rmse", "gaussians", "dropped"} <= set(m.metrics)
    saved = json.loads((out / "manifest.json").read_text())
    assert saved["metrics"] == json.loads(m.metric_block())


def test_all_stages_disabled_records_substitutions(tiny_dataset, tmp_path):
    off = {k: False for k in ("fusion", "mask", "spgm", "bidirectional", "stabilize", "refine")}
    m = run_pipeline(config_from_dict(tiny_config(tiny_dataset, tmp_path / "run", stages=off)))
    subs = " | ".join(m.substitutions)
    for word in ("fusion disabled", "mask disabled", "stabilization skipped", "pruning disabled", "refinement skipped"):
        assert word in subs
    assert m.metrics["dropped"] == 0


def test_same_seed_same_metrics(tiny_dataset, tmp_path):
    blocks = [run_pipeline(config_from_dict(tiny_config(tiny_dataset, tmp_path / f"r{i}"))).metric_block()
              for i in range(2)]
    assert blocks[0] == blocks[1]


def test_missing_depth_fails_before_optimization(tiny_dataset, tmp_path):
    data = tmp_path / "data"
    shutil.copytree(tiny_dataset, data)
    (data / "depths" / "view4.pfm").unlink()
    with pytest.raises(StageError) as err:
        run_pipeline(config_from_dict(tiny_config(data, tmp_path / "run")))
    assert err.value.stage == "ingest"
    assert err.value.path.endswith("view4.pfm") and "view4.pfm" in str(err.value)
    assert not (tmp_path / "run" / "history.csv").exists()


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        config_from_dict({"data_dir": "x", "optim": {"jiont_iterations": 3}})
    with pytest.raises(ConfigError):
        config_from_dict({"data_dir": "x", "manage": {"r": 1.5}})
    with pytest.raises(ConfigError):
        config_from_dict({})
    (tmp_path / "c.toml").write_text('data_dir = "d"\n[optim]\njoint_iterations = 5\n')
    cfg = load_config(tmp_path / "c.toml")
    assert cfg.optim.joint_iterations == 5 and cfg.data_dir == str(tmp_path / "d")
    (tmp_path / "bad.toml").write_text("data_dir = \n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")


def test_config_hash_ignores_output_dir():
    a = config_from_dict({"data_dir": "x", "output_dir": "a"})
    b = config_from_dict({"data_dir": "x", "output_dir": "b"})
    c = config_from_dict({"data_dir": "x", "seed": 1})
    assert a.hash() == b.hash() != c.hash()


def test_ablation_table(tiny_dataset, tmp_path):
    table = run_ablation(config_from_dict(tiny_config(tiny_dataset, tmp_path / "abl")))
    assert [r["row"] for r in table] == list(ABLATION_ROWS)
    md = (tmp_path / "abl" / "ablation.md").read_text().splitlines()
    assert len(md) == 2 + len(ABLATION_ROWS) and md[0].startswith("| row | PSNR")
    assert (tmp_path / "abl" / "wo_mask" / "manifest.json").exists()
