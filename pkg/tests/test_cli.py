import json

import numpy as np
import pytest

from stts.cli import main
from stts.model import STTSModel
from stts.synthetic import read_dataset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps({"layers": 4, "layer": 1, "dim": 16, "heads": 2, "batch_size": 4}))
    assert main(["gen", "--out", str(root / "train.bin"), "--count", "12", "--seed", "1"]) == 0
    assert main(["train", "--data", str(root / "train.bin"), "--out", str(root / "ck"), "--config", str(cfg),
                 "--steps", "2", "--aux-warmup", "1", "--seed", "3"]) == 0
    return root


def test_gen_files(tmp_path, capsys):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    main(["gen", "--out", str(a), "--count", "3", "--seed", "5"])
    main(["gen", "--out", str(b), "--count", "3", "--seed", "5"])
    assert a.read_bytes() == b.read_bytes()
    main(["gen", "--out", str(a), "--count", "0"])
    assert a.read_bytes().endswith(b"---\n") and len(read_dataset(a)) == 0
    assert "wrote 0 videos" in capsys.readouterr().out


def test_gen_spec_file_and_frames(tmp_path):
    spec = tmp_path / "spec.txt"
    spec.write_text("frames=4\nnoise=0.0\n")
    main(["gen", "--spec", str(spec), "--out", str(tmp_path / "d.bin"), "--count", "2", "--frames", "6"])
    ds = read_dataset(tmp_path / "d.bin")
    assert ds.spec.frames == 6 and ds.spec.noise == 0.0


def test_train_outputs(workspace):
    lines = (workspace / "ck" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "# schema=stts-train-metrics/1"
    assert lines[1] == "step,task_loss,sim_loss,total,retained_ratio,wallclock"
    assert len(lines) == 2 + 3
    model = STTSModel.load(workspace / "ck")
    assert model.cfg.layers == 4 and model.cfg.seed == 3


def test_eval_csv(workspace, tmp_path, capsys):
    out = tmp_path / "e.csv"
    rc = main(["eval", "--checkpoint", str(workspace / "ck"), "--data", str(workspace / "train.bin"),
               "--ks", "0,50", "--modes", "stts,random", "--out", str(out)])
    assert rc == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "# schema=stts-eval/1" and len(rows) == 2 + 4
    assert "stts,50,"in capsys.readouterr().out


def test_eval_is_deterministic(workspace, tmp_path):
    args = ["eval", "--checkpoint", str(workspace / "ck"), "--data", str(workspace / "train.bin"),
            "--ks", "70", "--modes", "random", "--seed", "4"]
    main(args + ["--out", str(tmp_path / "a.csv")])
    main(args + ["--out", str(tmp_path / "b.csv")])
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_viz(workspace, tmp_path, capsys):
    rc = main(["viz", "--checkpoint", str(workspace / "ck"), "--data", str(workspace / "train.bin"),
               "--index", "2", "--out", str(tmp_path / "v"), "--prune-ratio", "50"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "foreground_retention=" in out
    assert len(list((tmp_path / "v").glob("frame_*.pgm"))) == 8
    assert (tmp_path / "v" / "mask.txt").read_text() in out


def test_verify_exit_codes(capsys):
    assert main(["verify", "ffd"]) == 0
    assert "[PASS] ffd" in capsys.readouterr().out
    assert main(["verify", "budget", "--seed", "7"]) == 0


def test_bench_cli(tmp_path, capsys):
    rc = main(["bench", "--frames", "4", "--ks", "0,50", "--repeats", "1", "--layers", "3", "--layer", "1",
               "--out", str(tmp_path / "b.csv")])
    assert rc == 0
    assert (tmp_path / "b.csv").read_text().startswith("# schema=stts-bench/1\n")


def test_corrupt_checkpoint_magic(workspace, tmp_path, capsys):
    import shutil

    ck = tmp_path / "ck"
    shutil.copytree(workspace / "ck", ck)
    w = ck / "weights.bin"
    w.write_bytes(b"XXXX" + w.read_bytes()[4:])
    rc = main(["eval", "--checkpoint", str(ck), "--data", str(workspace / "train.bin")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "bad magic b'XXXX'" in err and "weights.bin at byte 0" in err


@pytest.mark.parametrize("argv, needle", [
    (["eval", "--checkpoint", "/nonexistent", "--data", "/nonexistent"], "checkpoint"),
    (["train", "--data", "/nonexistent", "--out", "/tmp/x"], "error"),
])
def test_usage_errors_exit_2(argv, needle, capsys):
    assert main(argv) == 2
    assert needle in capsys.readouterr().err


def test_bad_config_value(workspace, tmp_path, capsys):
    rc = main(["train", "--data", str(workspace / "train.bin"), "--out", str(tmp_path / "c"),
               "--pool-width", "4"])
    assert rc == 2 and "config" in capsys.readouterr().err


def test_no_protect_first_flag(workspace, tmp_path, capsys):
    main(["viz", "--checkpoint", str(workspace / "ck"), "--out", str(tmp_path / "v"), "--prune-ratio", "100",
          "--mode", "random", "--no-protect-first"])
    assert (tmp_path / "v" / "mask.txt").read_text() == ("0" * 36 + "\n") * 8
