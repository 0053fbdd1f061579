import csv
import io
import json
import math
import re
import xml.etree.ElementTree as ET
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

import pytest

from qlmq.cli import main, strict_csv, write_artifact
from qlmq.config import load_config, parse_config, serialize_config
from qlmq.data import synth_corpus
from qlmq.errors import ContractError

MODEL = {"vocab_size": 256, "n_layers": 1, "d_model": 32, "n_heads": 2,
         "d_ff": 64, "max_seq_len": 32}
TRAIN = {"batch_size": 16, "epochs": 1, "seed": 0}


def run_cli(argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


def read_csv(path: Path):
    rows = list(csv.reader(path.read_text().splitlines()))
    return rows[0], rows[1:]


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus.bin"
    corpus.write_bytes(synth_corpus(size_bytes=20_000, seed=3))
    cfg = {"model": MODEL, "train": TRAIN, "data": {"corpus_path": str(corpus)}}
    (root / "teacher.json").write_text(json.dumps(cfg))
    student = dict(cfg, quant={"w_bits": 2, "e_bits": 2, "a_bits": 8,
                               "scheme": "dynamic"},
                   distill={"lambda": 0.1, "negatives": 8})
    (root / "student.json").write_text(json.dumps(student))
    return root


@pytest.fixture(scope="module")
def teacher_run(ws):
    out = ws / "runs-teacher"
    code, text, _ = run_cli(["train-teacher", "--config", str(ws / "teacher.json"),
                             "--out", str(out)])
    assert code == 0
    (run_dir,) = out.iterdir()
    return run_dir, text


@pytest.fixture(scope="module")
def student_run(ws, teacher_run):
    run_dir, _ = teacher_run
    out = ws / "runs-student"
    code, text, _ = run_cli(["train-quant", "--config", str(ws / "student.json"),
                             "--teacher", str(run_dir / "teacher.ckpt"),
                             "--out", str(out)])
    assert code == 0
    (sdir,) = out.iterdir()
    return sdir, text


class TestTrainTeacher:
    def test_artifacts_and_summary_line(self, teacher_run):
        run_dir, text = teacher_run
        assert {p.name for p in run_dir.iterdir()} == {
            "config.json", "metrics.csv", "teacher.ckpt"}
        assert re.search(r"teacher val PPL \d+\.\d\d after \d+ steps", text)
        assert re.fullmatch(r"[0-9a-f]{12}-s0", run_dir.name)

    def test_metrics_schema(self, teacher_run):
        run_dir, _ = teacher_run
        header, rows = read_csv(run_dir / "metrics.csv")
        assert header == ["step", "loss", "lr", "val_ppl"]
        assert [r[0] for r in rows] == [str(i) for i in range(len(rows))]
        # validation PPL appears only on epoch-final steps (one epoch here)
        assert all(r[3] == "" for r in rows[:-1]) and float(rows[-1][3]) > 0
        losses = [float(r[1]) for r in rows]
        assert all(math.isfinite(v) for v in losses)

    def test_config_artifact_is_canonical_and_resolved(self, ws, teacher_run):
        run_dir, _ = teacher_run
        saved = (run_dir / "config.json").read_text()
        rc = parse_config(saved)
        assert serialize_config(rc) == saved
        assert rc.data["corpus_path"] == str(ws / "corpus.bin")
        assert rc.model["d_model"] == 32

    def test_rerun_is_idempotent(self, ws, teacher_run):
        run_dir, _ = teacher_run
        before = (run_dir / "teacher.ckpt").read_bytes()
        code, text, _ = run_cli(["train-teacher", "--config",
                                 str(ws / "teacher.json"),
                                 "--out", str(ws / "runs-teacher")])
        assert code == 0
        assert text.count("unchanged") == 3
        assert (run_dir / "teacher.ckpt").read_bytes() == before

    def test_same_seed_runs_are_bitwise_identical(self, ws, teacher_run):
        run_dir, _ = teacher_run
        out2 = ws / "runs-teacher-again"
        code, _, _ = run_cli(["train-teacher", "--config",
                              str(ws / "teacher.json"), "--out", str(out2)])
        assert code == 0
        (run2,) = out2.iterdir()
        assert run2.name == run_dir.name
        for name in ("metrics.csv", "teacher.ckpt"):
            assert (run2 / name).read_bytes() == (run_dir / name).read_bytes()

    def test_refuses_to_overwrite_differing_artifact(self, ws, teacher_run):
        run_dir, _ = teacher_run
        out = ws / "runs-clobber"
        target = out / run_dir.name / "config.json"
        target.parent.mkdir(parents=True)
        target.write_text("junk")
        argv = ["train-teacher", "--config", str(ws / "teacher.json"),
                "--out", str(out)]
        code, _, err = run_cli(argv)
        assert code == 1 and "refusing to overwrite" in err
        code, _, _ = run_cli(argv + ["--force"])
        assert code == 0
        assert target.read_text() != "junk"

    def test_missing_corpus_exits_2(self, ws, tmp_path):
        cfg = {"model": MODEL, "train": TRAIN,
               "data": {"corpus_path": str(tmp_path / "nope.bin")}}
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        code, _, err = run_cli(["train-teacher", "--config", str(p),
                                "--out", str(tmp_path / "runs")])
        assert code == 2 and "corpus file not found" in err and "nope.bin" in err

    def test_missing_config_flag_exits_2(self, tmp_path):
        code, _, err = run_cli(["train-teacher", "--out", str(tmp_path)])
        assert code == 2 and "--config is required" in err

    def test_unknown_override_path_exits_2(self, ws, tmp_path):
        code, _, err = run_cli(["train-teacher", "--config",
                                str(ws / "teacher.json"), "--out", str(tmp_path),
                                "--set", "nosuch.key=1"])
        assert code == 2 and "nosuch" in err


class TestTrainQuant:
    def test_artifacts_and_summary_line(self, student_run):
        sdir, text = student_run
        assert {p.name for p in sdir.iterdir()} == {
            "config.json", "metrics.csv", "gamma.csv", "student.ckpt"}
        assert re.search(r"student val PPL \d+\.\d\d vs teacher \d+\.\d\d", text)

    def test_metrics_schema(self, student_run):
        sdir, _ = student_run
        header, rows = read_csv(sdir / "metrics.csv")
        assert header == ["step", "loss", "l_s2t", "l_t2s", "l_cont",
                          "l_dist", "lr", "lr_clip", "val_ppl"]
        # the bank bootstraps on the first batch, then the term engages
        assert float(rows[0][4]) == 0.0
        assert all(float(r[4]) > 0 for r in rows[1:])
        assert float(rows[-1][8]) > 0

    def test_gamma_artifact(self, student_run):
        sdir, _ = student_run
        header, rows = read_csv(sdir / "gamma.csv")
        assert header == ["epoch", "name", "value"]
        names = {r[1] for r in rows}
        assert any(n.startswith("layers.0.") for n in names)
        assert all(float(r[2]) > 0 for r in rows)

    def test_student_checkpoint_evaluates(self, ws, student_run):
        sdir, _ = student_run
        code, text, _ = run_cli(["eval", "--config", str(ws / "student.json"),
                                 "--ckpt", str(sdir / "student.ckpt")])
        assert code == 0
        assert re.search(r"PPL \d+\.\d\d", text)

    def test_incompatible_teacher_exits_1(self, ws, teacher_run, tmp_path):
        run_dir, _ = teacher_run
        cfg = json.loads((ws / "student.json").read_text())
        cfg["model"] = dict(MODEL, d_model=48)
        p = tmp_path / "wide.json"
        p.write_text(json.dumps(cfg))
        code, _, err = run_cli(["train-quant", "--config", str(p),
                                "--teacher", str(run_dir / "teacher.ckpt"),
                                "--out", str(tmp_path / "runs")])
        assert code == 1 and "different model configuration" in err

    def test_missing_teacher_exits_2(self, ws, tmp_path):
        code, _, err = run_cli(["train-quant", "--config", str(ws / "student.json"),
                                "--teacher", str(tmp_path / "ghost.ckpt"),
                                "--out", str(tmp_path / "runs")])
        assert code == 2 and "teacher checkpoint not found" in err


class TestOverridesAndSeeds:
    def test_seed_flag_changes_suffix_not_digest(self, ws, tmp_path):
        out = tmp_path / "runs"
        for seed in (0, 5):
            code, _, _ = run_cli(["diag", "size", "--config",
                                  str(ws / "teacher.json"), "--out", str(out),
                                  "--seed", str(seed)])
            assert code == 0
        names = sorted(p.name for p in out.iterdir())
        digests = {n.split("-s")[0] for n in names}
        assert len(digests) == 1
        assert [n.split("-s")[1] for n in names] == ["0", "5"]

    def test_set_changes_digest(self, ws, tmp_path):
        out = tmp_path / "runs"
        for args in ([], ["--set", "quant.w_bits=8"]):
            code, _, _ = run_cli(["diag", "size", "--config",
                                  str(ws / "teacher.json"), "--out", str(out)]
                                 + args)
            assert code == 0
        assert len({p.name.split("-s")[0] for p in out.iterdir()}) == 2

    def test_set_lands_in_saved_config(self, ws, student_run, tmp_path):
        sdir, _ = student_run
        rc = load_config(sdir / "config.json")
        assert rc.distill["lambda"] == 0.1 and rc.distill["negatives"] == 8


class TestEval:
    def test_writes_full_precision_csv(self, ws, teacher_run):
        run_dir, _ = teacher_run
        code, text, _ = run_cli(["eval", "--config", str(ws / "teacher.json"),
                                 "--ckpt", str(run_dir / "teacher.ckpt")])
        assert code == 0
        printed = float(re.search(r"PPL (\d+\.\d\d)", text).group(1))
        header, rows = read_csv(run_dir / "eval-val.csv")
        assert header == ["split", "ppl"] and rows[0][0] == "val"
        exact = float(rows[0][1])
        assert repr(exact) == rows[0][1]  # full precision survives the CSV
        assert abs(exact - printed) < 0.005

    def test_train_split_and_idempotence(self, ws, teacher_run):
        run_dir, _ = teacher_run
        argv = ["eval", "--config", str(ws / "teacher.json"),
                "--ckpt", str(run_dir / "teacher.ckpt"), "--split", "train"]
        code, _, _ = run_cli(argv)
        assert code == 0 and (run_dir / "eval-train.csv").exists()
        code, text, _ = run_cli(argv)
        assert code == 0 and "unchanged" in text

    def test_corrupt_checkpoint_exits_1(self, ws, teacher_run, tmp_path):
        run_dir, _ = teacher_run
        raw = bytearray((run_dir / "teacher.ckpt").read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(raw))
        code, _, err = run_cli(["eval", "--config", str(ws / "teacher.json"),
                                "--ckpt", str(bad)])
        assert code == 1 and "CRC" in err


def svg_root(path: Path) -> ET.Element:
    return ET.fromstring(path.read_text())


def find_all(root: ET.Element, tag: str):
    return [el for el in root.iter() if el.tag.rsplit("}", 1)[-1] == tag]


class TestDiag:
    def test_sim_requires_sentence(self, ws, student_run):
        sdir, _ = student_run
        code, _, err = run_cli(["diag", "sim", "--config", str(ws / "student.json"),
                                "--ckpt", str(sdir / "student.ckpt")])
        assert code == 2 and "--sentence" in err

    def test_sim_outputs(self, ws, student_run):
        sdir, _ = student_run
        code, _, _ = run_cli(["diag", "sim", "--config", str(ws / "student.json"),
                              "--ckpt", str(sdir / "student.ckpt"),
                              "--sentence", "abc def"])
        assert code == 0
        (csv_p,) = sdir.glob("sim-*.csv")
        (svg_p,) = sdir.glob("sim-*.svg")
        header, rows = read_csv(csv_p)
        n = len("abc def")
        assert len(rows) == n and len(header) == n + 1
        assert abs(float(rows[2][4]) - float(rows[3][3])) < 1e-12  # symmetric
        root = svg_root(svg_p)
        assert len(find_all(root, "rect")) >= n * n

    def test_embed_outputs(self, ws, teacher_run):
        run_dir, _ = teacher_run
        code, text, _ = run_cli(["diag", "embed", "--config",
                                 str(ws / "teacher.json"),
                                 "--ckpt", str(run_dir / "teacher.ckpt"),
                                 "--top-k", "16"])
        assert code == 0
        assert "mean pairwise cosine" in text
        (csv_p,) = run_dir.glob("embed-*.csv")
        header, rows = read_csv(csv_p)
        assert len(rows) == 16 and len(header) == 17
        diag = [float(rows[i][i + 1]) for i in range(16)]
        assert diag == [1.0] * 16

    def test_hist_unknown_module_lists_options(self, ws, teacher_run):
        run_dir, _ = teacher_run
        code, _, err = run_cli(["diag", "hist", "--config", str(ws / "teacher.json"),
                                "--ckpt", str(run_dir / "teacher.ckpt"),
                                "--module", "bogus"])
        assert code == 2 and "tok_emb" in err and "bogus" in err

    def test_hist_outputs(self, ws, teacher_run):
        run_dir, _ = teacher_run
        code, _, _ = run_cli(["diag", "hist", "--config", str(ws / "teacher.json"),
                              "--ckpt", str(run_dir / "teacher.ckpt"),
                              "--module", "layers.0.w_o", "--bins", "32"])
        assert code == 0
        (csv_p,) = run_dir.glob("hist-*.csv")
        header, rows = read_csv(csv_p)
        assert header == ["bin_lo", "bin_hi", "count"] and len(rows) == 32
        counts = [int(r[2]) for r in rows]
        assert sum(counts) == 32 * 32  # every w_o entry lands in some bin

    def test_scaling_on_dynamic_student(self, ws, student_run):
        sdir, _ = student_run
        code, _, _ = run_cli(["diag", "scaling", "--config",
                              str(ws / "student.json"),
                              "--ckpt", str(sdir / "student.ckpt")])
        assert code == 0
        (csv_p,) = sdir.glob("scaling-*.csv")
        header, rows = read_csv(csv_p)
        assert header == ["name", "value"]
        names = [r[0] for r in rows]
        assert "tok_emb.median" in names  # per-row factors arrive summarized
        assert any(n.startswith("layers.0.") for n in names)

    def test_scaling_on_teacher_exits_2(self, ws, teacher_run):
        run_dir, _ = teacher_run
        code, _, err = run_cli(["diag", "scaling", "--config",
                                str(ws / "teacher.json"),
                                "--ckpt", str(run_dir / "teacher.ckpt")])
        assert code == 2 and "dynamic scheme" in err

    def test_size_needs_no_checkpoint(self, ws, tmp_path):
        code, text, _ = run_cli(["diag", "size", "--config",
                                 str(ws / "student.json"),
                                 "--out", str(tmp_path / "runs")])
        assert code == 0
        assert re.search(r"full \d+\.\d MB -> \d+\.\d MB \(\d+\.\dx\)", text)
        (run_dir,) = (tmp_path / "runs").iterdir()
        (csv_p,) = run_dir.glob("size-*.csv")
        header, rows = read_csv(csv_p)
        got = {r[0]: r[1] for r in rows}
        assert float(got["compression_ratio"]) > 1.0

    def test_missing_ckpt_flag_exits_2(self, ws):
        code, _, err = run_cli(["diag", "embed", "--config",
                                str(ws / "teacher.json")])
        assert code == 2 and "--ckpt" in err


class TestExport:
    def test_verifies_and_copies_verbatim(self, ws, student_run, tmp_path):
        sdir, _ = student_run
        src = sdir / "student.ckpt"
        dest = tmp_path / "deploy.ckpt"
        code, text, _ = run_cli(["export", "--ckpt", str(src),
                                 "--dest", str(dest)])
        assert code == 0
        m = re.search(r"exported (\d+) tensors \((\d+) packed\), digest [0-9a-f]{12}",
                      text)
        assert m and int(m.group(2)) > 0
        assert dest.read_bytes() == src.read_bytes()

    def test_corrupt_source_is_never_copied(self, ws, student_run, tmp_path):
        sdir, _ = student_run
        raw = bytearray((sdir / "student.ckpt").read_bytes())
        raw[-1] ^= 0x10
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(raw))
        dest = tmp_path / "deploy.ckpt"
        code, _, err = run_cli(["export", "--ckpt", str(bad), "--dest", str(dest)])
        assert code == 1 and not dest.exists()

    def test_refuses_differing_dest(self, ws, student_run, tmp_path):
        sdir, _ = student_run
        dest = tmp_path / "deploy.ckpt"
        dest.write_bytes(b"already here")
        code, _, err = run_cli(["export", "--ckpt", str(sdir / "student.ckpt"),
                                "--dest", str(dest)])
        assert code == 1 and "refusing to overwrite" in err
        assert dest.read_bytes() == b"already here"


class TestHelpers:
    def test_strict_csv_rejects_ragged_rows(self):
        with pytest.raises(ContractError, match="2 cells"):
            strict_csv(["a", "b", "c"], [[1, 2]])

    def test_strict_csv_rejects_non_finite(self):
        with pytest.raises(ContractError, match="non-finite"):
            strict_csv(["a"], [[float("nan")]])

    def test_strict_csv_floats_roundtrip(self):
        value = 0.1 + 0.2
        data = strict_csv(["x"], [[value]]).decode()
        assert float(data.splitlines()[1]) == value

    def test_write_artifact_reports_bytes(self, tmp_path, capsys):
        p = tmp_path / "a.bin"
        assert write_artifact(p, b"xyz", force=False) is True
        assert write_artifact(p, b"xyz", force=False) is False
        out = capsys.readouterr().out
        assert f"wrote {p} (3 bytes)" in out and f"unchanged {p}" in out
