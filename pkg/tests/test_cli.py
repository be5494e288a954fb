import subprocess
import sys

import pytest

from esd.cli import parse_config_text, run
from esd.data import load_features
from esd.errors import ConfigError
from esd.model import load_checkpoint

SMALL = ["--synth-k", "3", "--synth-d", "8", "--synth-samples", "20"]


def small_train(out, *extra):
    return run(["train", "--out", str(out), "--iterations", "5", "--hidden", "4", "--batch-size", "8", *SMALL, *extra])


@pytest.fixture
def synth_files(tmp_path):
    out = tmp_path / "data"
    assert run(["gen-synth", "--out", str(out), *SMALL]) == 0
    return out / "source.esdf", out / "target.esdf"


def test_train_outputs_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert small_train(a) == 0 and small_train(b) == 0
    for name in ("checkpoint.esdm", "metrics.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert len((a / "metrics.csv").read_text().splitlines()) == 5
    assert "target_accuracy" in (a / "eval.txt").read_text()
    assert load_checkpoint(a / "checkpoint.esdm").K == 3


def test_manifest_records_defaults_and_overrides(tmp_path):
    assert small_train(tmp_path / "m", "--beta", "0.25") == 0
    text = (tmp_path / "m" / "manifest.cfg").read_text()
    assert text.startswith("# esd ")
    assert "alpha = 0.3\n" in text
    assert "beta = 0.25\n" in text
    values = parse_config_text(text)
    assert values["iterations"] == 5 and values["beta"] == 0.25


def test_manifest_replays_the_run(tmp_path):
    assert small_train(tmp_path / "first", "--seed", "7") == 0
    manifest = tmp_path / "first" / "manifest.cfg"
    assert run(["train", "--config", str(manifest), "--out", str(tmp_path / "second")]) == 0
    for name in ("checkpoint.esdm", "metrics.csv"):
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\niterations = 3\nhidden = 4\nbatch_size = 8\nsynth_d = 8\nsynth_samples = 20\n")
    assert run(["train", "--config", str(cfg), "--iterations", "2", "--out", str(tmp_path / "o")]) == 0
    assert len((tmp_path / "o" / "metrics.csv").read_text().splitlines()) == 2


def test_unknown_flag_exits_2(tmp_path, capsys):
    assert run(["train", "--no-such-flag", "--out", str(tmp_path)]) == 2


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("gamma = 1\n")
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "gamma" in capsys.readouterr().err


def test_bad_value_exits_2(tmp_path):
    assert small_train(tmp_path / "o", "--lr", "-1") == 2


def test_parse_config_rejects_unknown_key():
    with pytest.raises(ConfigError):
        parse_config_text("nope = 3\n")


def test_truncated_features_exit_3(tmp_path, synth_files, capsys):
    src, tgt = synth_files
    cut = tmp_path / "cut.esdf"
    cut.write_bytes(src.read_bytes()[:50])
    code = run(["train", "--source", str(cut), "--target", str(tgt), "--out", str(tmp_path / "o")])
    assert code == 3
    assert "byte offset" in capsys.readouterr().err


def test_missing_file_exits_3(tmp_path, synth_files):
    _, tgt = synth_files
    assert run(["train", "--source", str(tmp_path / "nope.esdf"), "--target", str(tgt), "--out", str(tmp_path)]) == 3


def test_unwritable_output_exits_1(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert small_train(blocker / "sub") == 1


def test_eval_and_project_from_files(tmp_path, synth_files):
    src, tgt = synth_files
    train_dir = tmp_path / "t"
    common = ["--source", str(src), "--target", str(tgt), "--hidden", "4", "--batch-size", "8"]
    assert run(["train", "--out", str(train_dir), "--iterations", "3", *common]) == 0
    ckpt = train_dir / "checkpoint.esdm"
    assert run(["eval", "--out", str(tmp_path / "e"), "--checkpoint", str(ckpt), *common]) == 0
    assert (tmp_path / "e" / "eval.txt").read_text() == (train_dir / "eval.txt").read_text()
    for space in ("raw", "di", "ds"):
        out = tmp_path / f"p_{space}"
        extra = [] if space == "raw" else ["--checkpoint", str(ckpt)]
        assert run(["project", "--out", str(out), "--features", str(tgt), "--space", space, *extra]) == 0
        assert len((out / "projection.csv").read_text().splitlines()) == load_features(tgt).n


def test_eval_needs_checkpoint(tmp_path, synth_files):
    src, tgt = synth_files
    assert run(["eval", "--out", str(tmp_path / "e"), "--source", str(src), "--target", str(tgt)]) == 2


def test_gen_synth_text_format(tmp_path):
    assert run(["gen-synth", "--out", str(tmp_path), "--format", "text", *SMALL]) == 0
    assert load_features(tmp_path / "source.esdf").labels is not None


def test_ablate_command(tmp_path):
    out = tmp_path / "ab"
    args = ["ablate", "--out", str(out), "--iterations", "2", "--hidden", "4", "--batch-size", "8", "--seeds", "0,1,2"]
    assert run(args + SMALL) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in lines[1:]] == ["full", "no_step3", "no_step2", "no_step2_no_step3"]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "esd", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("esd ")
