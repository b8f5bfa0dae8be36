import csv
import io
import time
from pathlib import Path

import numpy as np
import pytest

from protoseg import ptns
from protoseg.cli import (
    TRAIN_KEYS,
    CliError,
    RunManifest,
    build_parser,
    hash_inputs,
    main,
    parse_config,
    staged_output,
)
from protoseg.encoder import EncoderConfig, init_encoder
from protoseg.trainer import load_checkpoint

SMOKE = """\
# smoke run
iterations = 50
decay_interval = 25
log_every = 10
encoder_widths = 8,16
encoder_strides = 2,1
encoder_dilations = 1,2
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A 16x16 dataset and a 50-iteration smoke checkpoint, built once."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--per-class", "12", "--size", "16"]) == 0
    (root / "smoke.cfg").write_text(SMOKE)
    t0 = time.perf_counter()
    code = main(["train", "--data", str(root / "data"), "--fold", "0", "--config", str(root / "smoke.cfg"),
                 "--out", str(root / "run"), "--quiet"])
    elapsed = time.perf_counter() - t0
    assert code == 0
    return root, elapsed


def eval_args(root, *extra):
    return ["eval", "--data", root / "data", "--fold", 0, "--checkpoint", root / "run" / "checkpoint.ptns",
            "--episodes", 6, "--runs", 2, *extra]


class TestConfig:
    def test_typed_values(self):
        cfg = parse_config("learning_rate = 0.01\nhflip_augment = false\nencoder_widths = 4, 8\n", TRAIN_KEYS)
        assert cfg == {"learning_rate": 0.01, "hflip_augment": False, "encoder_widths": (4, 8)}

    @pytest.mark.parametrize(
        "text,msg",
        [
            ("colour = red\n", "unknown key 'colour'"),
            ("iterations = many\n", "bad value for iterations"),
            ("iterations\n", "expected 'key = value'"),
            ("seed = 1\nseed = 2\n", "duplicate key"),
        ],
    )
    def test_rejections(self, text, msg):
        with pytest.raises(CliError, match=msg):
            parse_config(text, TRAIN_KEYS, "x.cfg")

    def test_unknown_key_exit_code(self, tmp_path, capsys, workspace):
        root, _ = workspace
        (tmp_path / "bad.cfg").write_text("nonsense = 1\n")
        code, _, err = run(capsys, "train", "--data", root / "data", "--fold", 0, "--config", tmp_path / "bad.cfg",
                           "--out", tmp_path / "o")
        assert code == 1 and "unknown key 'nonsense'" in err
        assert not (tmp_path / "o").exists()


class TestSynth:
    def test_defaults(self):
        args = build_parser().parse_args(["synth", "--out", "x"])
        assert (args.classes, args.per_class, args.size, args.seed) == (8, 200, 64, 0)

    def test_layout_and_folds(self, workspace):
        root, _ = workspace
        data = root / "data"
        assert sorted(p.name for p in (data / "index").iterdir()) == [f"{c}.tsv" for c in range(1, 9)]
        assert (data / "folds.txt").read_text() == "0\t1,2\n1\t3,4\n2\t5,6\n3\t7,8\n"
        assert len((data / "index" / "5.tsv").read_text().splitlines()) == 12

    def test_byte_identical(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(capsys, "synth", "--out", tmp_path / name, "--per-class", 2, "--size", 16, "--seed", 4)[0] == 0
        (tmp_path / "a" / "manifest.txt").unlink()
        (tmp_path / "b" / "manifest.txt").unlink()
        assert hash_inputs([tmp_path / "a"]) == hash_inputs([tmp_path / "b"])

    def test_seed_env_override(self, tmp_path, capsys, monkeypatch):
        run(capsys, "synth", "--out", tmp_path / "a", "--per-class", 1, "--size", 16, "--seed", 9)
        monkeypatch.setenv("PROTOSEG_SEED", "9")
        run(capsys, "synth", "--out", tmp_path / "b", "--per-class", 1, "--size", 16, "--seed", 0)
        assert "seed.seed=9" in (tmp_path / "b" / "manifest.txt").read_text()
        assert (tmp_path / "a" / "images").exists()
        a = sorted((tmp_path / "a" / "images").iterdir())
        b = sorted((tmp_path / "b" / "images").iterdir())
        assert [x.read_bytes() for x in a] == [x.read_bytes() for x in b]

    def test_hue_jitter_flag(self, tmp_path, capsys):
        assert build_parser().parse_args(["synth", "--out", "x"]).hue_jitter == 0.08
        assert build_parser().parse_args(["synth", "--out", "x", "--hue-jitter", "none"]).hue_jitter is None
        with pytest.raises(SystemExit):
            build_parser().parse_args(["synth", "--out", "x", "--hue-jitter", "-1"])
        capsys.readouterr()
        run(capsys, "synth", "--out", tmp_path / "n", "--per-class", 1, "--size", 16, "--hue-jitter", "none")
        assert "config.hue_jitter=None" in (tmp_path / "n" / "manifest.txt").read_text()

    def test_too_few_classes(self, tmp_path, capsys):
        code, _, err = run(capsys, "synth", "--out", tmp_path / "d", "--classes", 3)
        assert code == 1 and "need ≥ 4 classes for 4 folds" in err
        assert not (tmp_path / "d").exists()


class TestTrain:
    def test_smoke_run(self, workspace):
        root, elapsed = workspace
        assert elapsed < 60
        params, state, it, meta = load_checkpoint(root / "run" / "checkpoint.ptns")
        assert it == 50 and state.step == 50 and meta["fold"] == "0"
        assert (root / "run" / "checkpoint_000025.ptns").exists()
        log = (root / "run" / "train_log.tsv").read_text().splitlines()
        assert log[0] == "iteration\tloss\tlr" and log[1].startswith("1\t") and log[-1].startswith("50\t")

    def test_manifest(self, workspace):
        root, _ = workspace
        m = RunManifest.from_text((root / "run" / "manifest.txt").read_text())
        assert m.subcommand == "train" and m.config["iterations"] == "50"
        assert m.config["encoder.widths"] == "8,16"
        assert "checkpoint.ptns" in m.outputs and len(m.input_hash) == 64
        assert m.input_hash == hash_inputs([Path(p) for p in m.inputs])

    def test_missing_fold_file(self, tmp_path, capsys, workspace):
        root, _ = workspace
        import shutil

        shutil.copytree(root / "data", tmp_path / "data")
        (tmp_path / "data" / "folds.txt").unlink()
        code, _, err = run(capsys, "train", "--data", tmp_path / "data", "--fold", 0, "--out", tmp_path / "o")
        assert code == 1 and f"expected {tmp_path / 'data' / 'folds.txt'}" in err

    def test_resume_reproduces(self, tmp_path, capsys, workspace):
        root, _ = workspace
        args = ["--data", root / "data", "--fold", 0, "--config", root / "smoke.cfg", "--quiet"]
        assert run(capsys, "train", *args, "--out", tmp_path / "first", "--iterations", 25)[0] == 0
        assert run(capsys, "train", *args, "--out", tmp_path / "second",
                   "--resume", tmp_path / "first" / "checkpoint.ptns")[0] == 0
        resumed, *_ = load_checkpoint(tmp_path / "second" / "checkpoint.ptns")
        full, *_ = load_checkpoint(root / "run" / "checkpoint.ptns")
        assert resumed.equals(full)

    def test_divergence_removes_partial_output(self, tmp_path, capsys, workspace):
        root, _ = workspace
        (tmp_path / "hot.cfg").write_text(SMOKE + "learning_rate = 1e30\n")
        with np.errstate(all="ignore"):
            code, _, err = run(capsys, "train", "--data", root / "data", "--fold", 0, "--config", tmp_path / "hot.cfg",
                               "--out", tmp_path / "o", "--quiet")
        assert code == 1 and "non-finite loss" in err and "iteration" in err
        assert not (tmp_path / "o").exists()
        assert not [p for p in tmp_path.iterdir() if p.name.startswith(".o.")]

    def test_replay(self, tmp_path, capsys, workspace, monkeypatch):
        root, _ = workspace
        monkeypatch.chdir(root)
        assert run(capsys, "train", "--data", "data", "--fold", 0, "--config", "smoke.cfg",
                   "--out", tmp_path / "orig", "--quiet", "--iterations", 5)[0] == 0
        first = (tmp_path / "orig" / "checkpoint.ptns").read_bytes()
        (tmp_path / "orig" / "checkpoint.ptns").unlink()
        monkeypatch.chdir(tmp_path)
        assert run(capsys, "replay", tmp_path / "orig" / "manifest.txt")[0] == 0
        assert (tmp_path / "orig" / "checkpoint.ptns").read_bytes() == first
        assert Path.cwd() == tmp_path


class TestEval:
    def test_csv_and_determinism(self, capsys, workspace):
        root, _ = workspace
        code, a, err = run(capsys, *eval_args(root))
        assert code == 0 and "mean-IoU" in err and "±" in err
        _, b, _ = run(capsys, *eval_args(root))
        assert a == b
        rows = list(csv.DictReader(io.StringIO(a)))
        assert [r["stat"] for r in rows] == ["run", "run", "mean", "std"]

    def test_jobs_match_single_process(self, capsys, workspace):
        root, _ = workspace
        _, one, _ = run(capsys, *eval_args(root, "--adapt-steps", 1))
        _, two, _ = run(capsys, *eval_args(root, "--adapt-steps", 1, "--jobs", 2))
        for r1, r2 in zip(csv.DictReader(io.StringIO(one)), csv.DictReader(io.StringIO(two))):
            assert abs(float(r1["mean_iou"]) - float(r2["mean_iou"])) <= 1e-6

    def test_identity_flags(self, capsys, workspace):
        root, _ = workspace
        _, a, _ = run(capsys, *eval_args(root, "--fusion-steps", 0, "--adapt-steps", 0))
        _, b, _ = run(capsys, *eval_args(root, "--adapt-steps", 0, "--omega-s", 1, "--omega-q", 0, "--fusion-steps", 1))
        metric = lambda text: [(r["mean_iou"], r["binary_iou"]) for r in csv.DictReader(io.StringIO(text))]
        assert metric(a) == metric(b)

    def test_grid(self, capsys, workspace):
        root, _ = workspace
        code, out, _ = run(capsys, *eval_args(root, "--grid", "adapt=0,1", "fusion=0,2", "--runs", 1, "--episodes", 3))
        rows = list(csv.DictReader(io.StringIO(out)))
        cells = {(r["adapt_steps"], r["fusion_steps"]) for r in rows}
        assert code == 0 and cells == {("0", "0"), ("0", "2"), ("1", "0"), ("1", "2")}

    def test_too_many_ways(self, capsys, workspace):
        root, _ = workspace
        code, _, err = run(capsys, *eval_args(root, "--nway", 3))
        assert code == 1 and "exceeds" in err

    def test_dump_and_inspect_round_trip(self, tmp_path, capsys, workspace):
        root, _ = workspace
        code, _, _ = run(capsys, *eval_args(root, "--runs", 1, "--episodes", 2, "--nway", 2, "--dump-masks", tmp_path / "d"))
        assert code == 0
        ep = tmp_path / "d" / "run0" / "episode00001"
        names = {p.name for p in ep.iterdir()}
        assert {"query_0_truth.pgm", "query_0_support_only.pgm", "query_0_fused.pgm", "refine_trace.txt"} <= names
        code, out, _ = run(capsys, "inspect", "--episode-dump", ep)
        assert code == 0
        index = {}
        for line in (ep / "index.tsv").read_text().splitlines():
            _, mask, ids = line.split("\t")
            index[mask] = ids
        reported = dict(line.split("\t")[:2] for line in out.splitlines() if "\tclasses=" in line)
        assert {k: v.removeprefix("classes=") for k, v in reported.items()} == index
        legend = (ep / "rendered" / "legend.txt").read_text()
        assert legend.startswith("grey\tclass\tmeaning") and "background" in legend


class TestInspect:
    def test_default_checkpoint(self, tmp_path, capsys):
        from protoseg.trainer import save_checkpoint

        save_checkpoint(tmp_path / "c.ptns", init_encoder(EncoderConfig(), 0))
        code, out, _ = run(capsys, "inspect", "--checkpoint", tmp_path / "c.ptns")
        expected = (16 * 27 + 16) + (32 * 144 + 32) + (64 * 288 + 64)
        assert code == 0 and "blocks 3" in out and f"parameters {expected}" in out

    def test_truncated(self, tmp_path, capsys, workspace):
        root, _ = workspace
        data = (root / "run" / "checkpoint.ptns").read_bytes()
        (tmp_path / "t.ptns").write_bytes(data[:100])
        code, _, err = run(capsys, "inspect", "--checkpoint", tmp_path / "t.ptns")
        assert code == 1 and "unexpected end of file at offset 100" in err


def test_staged_output_failure_keeps_existing(tmp_path):
    out = tmp_path / "o"
    out.mkdir()
    (out / "keep.txt").write_text("old")
    with pytest.raises(RuntimeError):
        with staged_output(out) as stage:
            (stage / "keep.txt").write_text("new")
            raise RuntimeError
    assert (out / "keep.txt").read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["o"]
