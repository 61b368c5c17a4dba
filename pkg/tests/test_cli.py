import csv
import math

import pytest
import yaml

from r2l.cli import ABLATION_SCHEMA, ENTROPY_SCHEMA, METRICS_COLUMNS, METRICS_SCHEMA, main

FAST_CONFIG = {
    "traj": {"loop_length": 100.0},
    "dataset": {"probe_count": 8},
    "arch": {"embed_dim": 4, "backbone": [4, 8], "attn_dim": 8, "heads": 2, "ff_dim": 8,
             "vlad_clusters": 4, "desc_dim": 16},
    "train": {"stage1_epochs": 1, "stage2_epochs": 1, "steps_per_epoch": 3, "align_steps_per_epoch": 2},
}


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "fast.yaml"
    cfg.write_text(yaml.safe_dump(FAST_CONFIG))
    assert main(["gen", "--config", str(cfg), "--out", str(root / "ds")]) == 0
    assert main(["train", "--config", str(cfg), "--manifest", str(root / "ds"), "--out", str(root / "run")]) == 0
    return root, cfg


def test_gen_is_byte_reproducible(workspace, tmp_path):
    root, cfg = workspace
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    a = sorted(p.relative_to(root / "ds") for p in (root / "ds").rglob("*") if p.is_file())
    b = sorted(p.relative_to(tmp_path / "again") for p in (tmp_path / "again").rglob("*") if p.is_file())
    assert a == b
    for rel in a:
        assert (root / "ds" / rel).read_bytes() == (tmp_path / "again" / rel).read_bytes(), rel


def test_unknown_radar_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--radar", "bogus", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_unknown_config_key_exits_2(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"train": {"epochz": 3}}))
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2


def test_missing_manifest_exits_2(tmp_path):
    assert main(["eval", "--manifest", str(tmp_path / "nope"), "--checkpoints", str(tmp_path)]) == 2


def test_train_writes_frozen_r_checkpoints(workspace):
    root, _ = workspace
    names = sorted(p.name for p in (root / "run").glob("*.ckpt"))
    assert names == ["lidar-aligned.ckpt", "lidar-pre.ckpt", "radar-pre.ckpt"]
    resolved = yaml.safe_load((root / "run" / "resolved_config.yaml").read_text())
    assert resolved["train"]["regime"] == "frozen_r"
    assert resolved["arch"]["desc_dim"] == 16


def test_no_pretrain_skips_pretrain_checkpoints(workspace, tmp_path):
    root, cfg = workspace
    assert main(["train", "--config", str(cfg), "--manifest", str(root / "ds"), "--variant", "no_pretrain",
                 "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["lidar-aligned.ckpt", "radar-aligned.ckpt"]


def test_eval_cross_row(workspace, tmp_path):
    root, cfg = workspace
    assert main(["eval", "--config", str(cfg), "--manifest", str(root / "ds"), "--checkpoints", str(root / "run"),
                 "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "metrics_cross.csv")
    assert len(rows) == 1
    assert tuple(rows[0]) == METRICS_COLUMNS
    assert rows[0]["schema"] == METRICS_SCHEMA
    metrics = [float(rows[0][k]) for k in ("AR@1", "AR@5", "AR@10", "AR@20", "maxF1")]
    assert len(metrics) == 5
    assert metrics[:4] == sorted(metrics[:4])
    assert (tmp_path / "metrics_cross.md").exists()


def test_eval_rpr_unchanged_by_frozen_r_alignment(workspace, tmp_path):
    root, cfg = workspace
    out = {}
    for stage in ("pre", "aligned"):
        assert main(["eval", "--config", str(cfg), "--manifest", str(root / "ds"), "--checkpoints",
                     str(root / "run"), "--stage", stage, "--mode", "rpr", "--out", str(tmp_path / stage)]) == 0
        out[stage] = _rows(tmp_path / stage / "metrics_rpr.csv")[0]
    assert out["pre"] == out["aligned"]


def test_eval_snow_is_seeded(workspace, tmp_path):
    root, cfg = workspace
    rows = []
    for i in range(2):
        assert main(["eval", "--config", str(cfg), "--manifest", str(root / "ds"), "--checkpoints",
                     str(root / "run"), "--mode", "lpr", "--corrupt", "snow", "--clutter", "500",
                     "--out", str(tmp_path / str(i))]) == 0
        rows.append(_rows(tmp_path / str(i) / "metrics_lpr_snow.csv")[0])
    assert rows[0] == rows[1]
    assert rows[0]["corrupt"] == "snow"


def test_eval_arch_mismatch_exits_nonzero(workspace, tmp_path):
    root, _ = workspace
    other = tmp_path / "other.yaml"
    cfg = dict(FAST_CONFIG, arch=dict(FAST_CONFIG["arch"], desc_dim=8))
    other.write_text(yaml.safe_dump(cfg))
    code = main(["eval", "--config", str(other), "--manifest", str(root / "ds"), "--checkpoints", str(root / "run"),
                 "--out", str(tmp_path)])
    assert code != 0


def test_entropy_rows_and_chain_rule(workspace, tmp_path, capsys):
    root, cfg = workspace
    assert main(["entropy", "--config", str(cfg), "--manifest", str(root / "ds"), "--checkpoints",
                 str(root / "run"), "--phases", "init", "post-pretrain", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "entropy.csv")
    assert [r["phase"] for r in rows] == ["init", "post-pretrain"]
    assert all(r["schema"] == ENTROPY_SCHEMA for r in rows)
    for r in rows:
        hl, hr, hlr, hrl = (float(r[k]) for k in ("H(L)", "H(R)", "H(L|R)", "H(R|L)"))
        # H(L, R) = H(R) + H(L|R) = H(L) + H(R|L), up to the 4-decimal CSV rounding
        assert math.isclose(hr + hlr, hl + hrl, abs_tol=2e-4)
    assert "reversal: " in capsys.readouterr().out
    assert (tmp_path / "entropy_annotation.txt").exists()


def test_entropy_identical_branches_has_zero_conditional(workspace, tmp_path):
    root, cfg = workspace
    assert main(["entropy", "--config", str(cfg), "--manifest", str(root / "ds"), "--phases", "init",
                 "--identical", "--out", str(tmp_path)]) == 0
    row = _rows(tmp_path / "entropy.csv")[0]
    assert float(row["H(L|R)"]) == 0.0
    assert float(row["H(R|L)"]) == 0.0


def test_entropy_later_phase_requires_checkpoints(workspace, tmp_path):
    root, cfg = workspace
    assert main(["entropy", "--config", str(cfg), "--manifest", str(root / "ds"), "--phases", "post-align",
                 "--out", str(tmp_path)]) == 2


def test_ablate_default_grid_rows(workspace, tmp_path):
    root, cfg = workspace
    assert main(["ablate", "--config", str(cfg), "--manifest", str(root / "ds"), "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "ablation.csv")
    assert len(rows) == 9 + 3
    assert all(r["schema"] == ABLATION_SCHEMA and r["status"] == "ok" for r in rows)
    grid = [r for r in rows if r["kind"] == "cell"]
    assert len(grid) == 9
    for r in grid:
        if r["regime"] == "frozen_r":
            assert float(r["dRPR@1"]) == 0.0
        if r["regime"] == "frozen_l":
            assert float(r["dLPR@1"]) == 0.0
    assert (tmp_path / "ablation.md").exists()


def test_threads_env_validated(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("RLPR_THREADS", "zero")
    assert main(["gen", "--out", str(tmp_path)]) == 2
