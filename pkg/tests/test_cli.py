import re

import numpy as np
import pytest

from freqdiff.cli import COMMAND_FIELDS, build_parser, main, to_pgm
from freqdiff.config import RunConfig

TINY = ["--T", "4", "--depth", "1", "--base-width", "4", "--time-embed-dim", "8", "--convs-per-block", "1",
        "--batch-size", "2", "--max-steps", "3", "--epochs", "1"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "train.bin"), "--count", "6", "--size", "8"]) == 0
    assert main(["gen-data", "--out", str(root / "test.bin"), "--count", "3", "--size", "8", "--data-seed", "2"]) == 0
    assert main(["train", "--data", str(root / "train.bin"), "--out", str(root / "m.ckpt"), *TINY]) == 0
    return root


def test_help_lists_every_field_with_default(capsys):
    for command, names in COMMAND_FIELDS.items():
        assert main([command, "--help"]) == 0
        text = " ".join(capsys.readouterr().out.split())
        for name in names:
            assert "--" + name.replace("_", "-") in text
        assert text.count("(default:") >= len(names)


def test_flags_map_to_fields():
    fields = set(RunConfig.__dataclass_fields__)
    for names in COMMAND_FIELDS.values():
        assert set(names) <= fields


def test_train_outputs(run):
    assert (run / "m.ckpt").exists()
    log = (run / "m.ckpt.log.csv").read_text().splitlines()
    assert len(log) == 4
    assert "T = 4" in (run / "m.ckpt.config").read_text()


def test_eval_all14(run, capsys):
    report = run / "eval.csv"
    assert main(["eval", "--checkpoint", str(run / "m.ckpt"), "--data", str(run / "test.bin"),
                 "--report", str(report)]) == 0
    lines = report.read_text().splitlines()
    assert len(lines) == 15
    assert {l.split(",")[0] for l in lines[1:]} == {format(i, "04b") for i in range(1, 15)}
    first = report.read_bytes(), (run / "eval.csv.rows.csv").read_bytes()
    assert main(["eval", "--checkpoint", str(run / "m.ckpt"), "--data", str(run / "test.bin"),
                 "--report", str(report)]) == 0
    assert (report.read_bytes(), (run / "eval.csv.rows.csv").read_bytes()) == first


def test_training_is_reproducible(run):
    other = run / "again.ckpt"
    assert main(["train", "--data", str(run / "train.bin"), "--out", str(other), *TINY]) == 0
    assert other.read_bytes() == (run / "m.ckpt").read_bytes()


def test_synth_writes_images(run):
    out = run / "synth"
    assert main(["synth", "--checkpoint", str(run / "m.ckpt"), "--data", str(run / "test.bin"),
                 "--mask", "1010", "--out-dir", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == sorted(["synth.csv"] + [f"s{i:04d}_{m}.{e}" for i in range(3) for m in ("T2", "T1ce")
                                            for e in ("pgm", "f32")])
    img = np.frombuffer((out / "s0000_T2.f32").read_bytes(), dtype="<f4")
    assert img.size == 64 and np.all(np.isfinite(img))
    assert len((out / "synth.csv").read_text().splitlines()) == 7


def test_pgm_mapping():
    blob = to_pgm(np.array([[-1.0, 0.0], [1.0, 2.0]]))
    assert blob.startswith(b"P5\n2 2\n255\n")
    assert list(blob[-4:]) == [0, 128, 255, 255]


def test_ablate_and_sweep(run):
    fam = run / "family"
    args = ["ablate", "--family", str(fam), "--data", str(run / "test.bin"), "--train-data", str(run / "train.bin"),
            "--variants", "full,no-guidance", "--masks", "easy", "--report", str(run / "abl.csv"), *TINY]
    assert main(args) == 0
    lines = (run / "abl.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in lines] == ["variant", "full", "no-guidance"]
    assert main(["sweep-T", "--data", str(run / "train.bin"), "--test", str(run / "test.bin"), "--T-list", "2,4",
                 "--masks", "hard", "--no-train", "--report", str(run / "sweep.csv"), *TINY[2:]]) == 0
    assert len((run / "sweep.csv").read_text().splitlines()) == 3
    timing = (run / "sweep.csv.timing.csv").read_text()
    assert re.search(r"^r2_linear,", timing, re.M)


@pytest.mark.parametrize("mask", ["1111", "0000", "10", "10a1"])
def test_bad_mask_exit_code(run, mask, capsys):
    code = main(["synth", "--checkpoint", str(run / "m.ckpt"), "--data", str(run / "test.bin"),
                 "--mask", mask, "--out-dir", str(run / "x")])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_error_exit_codes(run, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(run / "test.bin"),
                 "--report", str(tmp_path / "r.csv")]) == 3
    assert main(["train", "--data", str(tmp_path / "none.bin"), "--out", str(tmp_path / "m.ckpt")]) == 3
    assert main(["gen-data", "--out", str(tmp_path / "d.bin"), "--count", "zero"]) == 2
    assert main(["gen-data", "--out", str(tmp_path / "d.bin"), "--size", "0"]) == 2
    assert main(["train", "--data", str(run / "train.bin"), "--out", str(tmp_path / "m.ckpt"), "--batch-size", "1"]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("unknown_key = 3\n")
    assert main(["gen-data", "--out", str(tmp_path / "d.bin"), "--config", str(bad)]) == 2
    assert main(["ablate", "--family", str(tmp_path), "--data", str(run / "test.bin"), "--variants", "nope",
                 "--report", str(tmp_path / "a.csv")]) == 2
    assert main([]) == 2
    corrupt = tmp_path / "c.bin"
    corrupt.write_bytes(b"garbage")
    assert main(["synth", "--checkpoint", str(run / "m.ckpt"), "--data", str(corrupt), "--mask", "1000",
                 "--out-dir", str(tmp_path / "o")]) == 3


def test_parser_builds():
    assert build_parser().prog == "freqdiff"
