import json

import pytest

from mulo.cli import main


def run_cli(args):
    assert main(args) == 0


def test_make_dataset_and_evaluate_roundtrip(tmp_path):
    ds_path = tmp_path / "toy.mlod"
    run_cli(
        [
            "make-dataset", "--out", str(ds_path), "--n", "256", "--input-dim", "4",
            "--num-classes", "3", "--noise", "0.5", "--seed", "1",
        ]
    )
    assert ds_path.exists()
    out = tmp_path / "eval"
    run_cli(
        [
            "evaluate", "--optimizer", "adam", "--lr", "0.01", "--width", "8", "--depth", "3",
            "--input-dim", "4", "--num-classes", "3", "--batch-size", "16",
            "--dataset", str(ds_path), "--steps", "20", "--seeds", "0,1", "--out-dir", str(out),
        ]
    )
    text = (out / "curves.csv").read_text()
    assert text.startswith("task_id,optimizer,param_mode,width,depth,seed,step,loss,diverged,ood")
    assert (out / "curves_agg.csv").exists()


def meta_cfg(tmp_path, total=8):
    cfg = {
        "mode": "mup",
        "seed": 0,
        "tasks": [
            {
                "width": 8, "depth": 3, "input_dim": 4, "num_classes": 3,
                "batch_size": 16, "synthetic_n": 256, "synthetic_noise": 0.5,
            }
        ],
        "pes": {"num_pairs": 1, "sigma": 0.01, "trunc_len": 4, "max_unroll": 20},
        "schedule": {"max_lr": 3e-3, "warmup_steps": 2, "total_steps": total, "final_lr": 1e-3},
        "checkpoint_every": 0,
        "log_every": 0,
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_meta_train_then_evaluate_lo(tmp_path):
    cfg = meta_cfg(tmp_path)
    run_dir = tmp_path / "run"
    run_cli(["meta-train", "--config", str(cfg), "--out-dir", str(run_dir)])
    ckpt = run_dir / "lo_checkpoint.mulo"
    assert ckpt.exists() and ckpt.with_suffix(".mulo.json").exists()
    log = (run_dir / "meta_train_log.csv").read_text().strip().splitlines()
    assert log[0] == "outer_step,lr,mean_inner_loss,grad_norm,diverged_pairs"
    assert len(log) == 1 + 8

    out = tmp_path / "lo_eval"
    run_cli(
        [
            "evaluate", "--optimizer", "lo", "--checkpoint", str(ckpt), "--width", "8",
            "--input-dim", "4", "--num-classes", "3", "--batch-size", "16",
            "--synthetic-n", "256", "--steps", "30", "--seeds", "0", "--out-dir", str(out),
        ]
    )
    rows = (out / "curves.csv").read_text().strip().splitlines()
    # meta_unroll = 20 < 30 steps: late rows are flagged out-of-distribution
    assert any(r.endswith(",true") for r in rows[1:])


def test_inspect_checkpoint(tmp_path, capsys):
    cfg = meta_cfg(tmp_path, total=4)
    run_dir = tmp_path / "run"
    run_cli(["meta-train", "--config", str(cfg), "--out-dir", str(run_dir)])
    run_cli(["inspect-checkpoint", str(run_dir / "lo_checkpoint.mulo")])
    info = json.loads(capsys.readouterr().out)
    assert info["flat_dim"] == 969
    assert info["sidecar"]["param_mode"] == "mup"


def test_coordcheck_cli(tmp_path):
    out = tmp_path / "cc"
    run_cli(
        [
            "coordcheck", "--optimizer", "adam", "--lr", "0.01", "--widths", "8,16",
            "--input-dim", "4", "--num-classes", "3", "--batch-size", "16",
            "--synthetic-n", "256", "--steps", "20", "--seeds", "0", "--out-dir", str(out),
        ]
    )
    lines = (out / "coordcheck.csv").read_text().strip().splitlines()
    assert lines[0] == "optimizer,param_mode,width,seed,layer,step,std,diverged"
    assert len(lines) > 10


def test_sweep_cli_with_spec(tmp_path):
    spec = {
        "base_task": {
            "input_dim": 4, "num_classes": 3, "batch_size": 16,
            "synthetic_n": 256, "synthetic_noise": 0.5, "synthetic_seed": 0,
        },
        "widths": [8, 16],
        "depths": [3],
        "steps": [10],
        "seeds": [0, 1],
        "optimizers": [{"kind": "adam", "lr": 0.01}],
    }
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(spec))
    out = tmp_path / "sweep"
    run_cli(["sweep", "--spec", str(spec_path), "--out-dir", str(out)])
    assert (out / "curves.csv").exists() and (out / "curves_agg.csv").exists()


def test_cli_rejects_lo_without_checkpoint(tmp_path):
    with pytest.raises(SystemExit):
        main(
            [
                "evaluate", "--optimizer", "lo", "--width", "8", "--steps", "5",
                "--seeds", "0", "--out-dir", str(tmp_path),
            ]
        )


def test_every_command_is_byte_deterministic(tmp_path):
    """Run the CSV-producing commands twice; outputs must be byte-identical."""
    cfg = meta_cfg(tmp_path, total=5)
    pairs = []
    for tag in ("a", "b"):
        d = tmp_path / tag
        run_cli(["meta-train", "--config", str(cfg), "--out-dir", str(d / "mt")])
        run_cli(
            [
                "evaluate", "--optimizer", "muadam-s", "--width", "8", "--input-dim", "4",
                "--num-classes", "3", "--batch-size", "16", "--synthetic-n", "256",
                "--steps", "15", "--seeds", "0,1", "--out-dir", str(d / "ev"),
            ]
        )
        run_cli(
            [
                "coordcheck", "--optimizer", "muadam-s", "--widths", "8,16", "--input-dim", "4",
                "--num-classes", "3", "--batch-size", "16", "--synthetic-n", "256",
                "--steps", "10", "--seeds", "0", "--out-dir", str(d / "cc"),
            ]
        )
        pairs.append(d)
    a, b = pairs
    for rel in (
        "mt/meta_train_log.csv",
        "mt/lo_checkpoint.mulo",
        "ev/curves.csv",
        "ev/curves_agg.csv",
        "cc/coordcheck.csv",
    ):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_tune_adam_cli_smoke(tmp_path, capsys):
    out = tmp_path / "tune"
    run_cli(
        [
            "tune-adam", "--width", "8", "--depth", "3", "--input-dim", "4",
            "--num-classes", "3", "--batch-size", "16", "--synthetic-n", "256",
            "--steps", "5", "--seeds", "0", "--out-dir", str(out),
        ]
    )
    lines = (out / "grid.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 500  # full grid, one seed
    assert "best config:" in capsys.readouterr().out
