import json
import os

import pytest

from segmt.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from segmt.config import ConfigError, RunConfig, load_config, parse_overrides, apply_thread_env


@pytest.fixture
def in_run(tiny_run):
    cwd = os.getcwd()
    os.chdir(tiny_run)
    yield tiny_run
    os.chdir(cwd)


class TestConfig:
    def test_overrides(self):
        cfg = load_config(None, parse_overrides(["--beam", "3", "--training.lr=0.01", "--model.seed", "4"]))
        assert cfg.decoding.beam == 3 and cfg.training.lr == 0.01 and cfg.model.seed == 4

    def test_ambiguous_and_unknown(self):
        with pytest.raises(ConfigError, match="ambiguous"):
            load_config(None, [("seed", "1")])
        with pytest.raises(ConfigError, match="unknown"):
            load_config(None, [("bogus", "1")])
        with pytest.raises(ConfigError):
            load_config(None, [("beam", "many")])

    def test_optional_and_bool(self):
        cfg = load_config(None, [("time_budget", "12.5"), ("verbatim_char_terms", "yes")])
        assert cfg.training.time_budget == 12.5 and cfg.decoding.verbatim_char_terms is True
        cfg.set("time_budget", "")
        assert cfg.training.time_budget is None

    def test_file_round_trip(self, tmp_path):
        cfg = load_config(None, [("merges", "17"), ("delimiter", "|")])
        cfg.write(tmp_path / "c.ini")
        again = load_config(tmp_path / "c.ini")
        assert again.to_dict() == cfg.to_dict()
        assert again.digest() == cfg.digest() != RunConfig().digest()

    def test_validation(self):
        with pytest.raises(ConfigError):
            load_config(None, [("d_model", "5"), ("n_heads", "2")]).validate()

    def test_unknown_section(self, tmp_path):
        (tmp_path / "c.ini").write_text("[nope]\nx = 1\n")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.ini")

    def test_thread_env(self, monkeypatch):
        import torch
        before = torch.get_num_threads()
        monkeypatch.setenv("SEGMT_THREADS", "1")
        try:
            assert apply_thread_env() == 1
            assert torch.get_num_threads() == 1
        finally:
            torch.set_num_threads(before)
        monkeypatch.setenv("SEGMT_THREADS", "zero")
        with pytest.raises(ConfigError):
            apply_thread_env()


class TestExitCodes:
    def test_no_command(self):
        assert main([]) == EXIT_USAGE

    def test_bad_flag(self):
        assert main(["translate", "--input", "x", "--bogus", "1"]) == EXIT_USAGE

    def test_missing_input(self, tmp_path):
        assert main(["eval", "chrf", "--hyp", str(tmp_path / "nope"), "--ref", str(tmp_path / "nope")]) == EXIT_DATA

    def test_missing_config(self, tmp_path):
        assert main(["preprocess", "--config", str(tmp_path / "nope.ini")]) == EXIT_DATA

    def test_eval_needs_files(self):
        assert main(["eval", "bootstrap", "--hyp-a", "a"]) == EXIT_USAGE

    def test_preprocess_needs_paths(self, tmp_path):
        assert main(["preprocess", "--artifacts_dir", str(tmp_path)]) == EXIT_USAGE


class TestPreprocess:
    def test_manifest(self, in_run):
        man = json.loads((in_run / "art" / "manifest.json").read_text())
        assert man["command"] == "preprocess"
        assert man["max_seg_len"] == 4 and man["lexicon_size"] >= 1
        assert set(man["outputs"]) == {"bpe", "vocab", "lexicon"}

    def test_rebuild_is_byte_identical(self, in_run):
        assert main(["preprocess", "--config", "run.ini", "--artifacts_dir", "art2"]) == EXIT_OK
        for name in ("bpe.txt", "chars.txt", "lexicon.txt"):
            assert (in_run / "art" / name).read_bytes() == (in_run / "art2" / name).read_bytes()

    def test_train_outputs(self, in_run):
        for name in ("best.ckpt", "last.ckpt", "train_log.jsonl", "manifest.json"):
            assert (in_run / "ck" / name).is_file()
        lines = (in_run / "ck" / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 2 and json.loads(lines[0])["epoch"] == 1


class TestInference:
    def test_translate(self, in_run):
        src = (in_run / "train.src").read_text().splitlines()[:3]
        (in_run / "in.src").write_text("\n".join([src[0], "", src[1]]) + "\n")
        rc = main(["translate", "--config", "run.ini", "--input", "in.src", "--output", "out.tgt",
                   "--emit-segmentation", "out.seg"])
        assert rc == EXIT_OK
        out = (in_run / "out.tgt").read_text().split("\n")
        assert len(out) == 4 and out[1] == ""
        segs = (in_run / "out.seg").read_text().split("\n")
        assert [s.replace("-", "") for s in segs] == out
        man = json.loads((in_run / "out.tgt.manifest.json").read_text())
        assert man["decoder"] == "dynamic" and man["sentences"] == 3

    def test_translate_is_deterministic(self, in_run):
        (in_run / "one.src").write_text((in_run / "train.src").read_text().splitlines()[0] + "\n")
        for name in ("a.tgt", "b.tgt"):
            assert main(["translate", "--config", "run.ini", "--input", "one.src", "--output", name,
                         "--mixture-beam"]) == EXIT_OK
        assert (in_run / "a.tgt").read_bytes() == (in_run / "b.tgt").read_bytes()

    def test_empty_input(self, in_run):
        (in_run / "empty.src").write_text("")
        assert main(["translate", "--config", "run.ini", "--input", "empty.src", "--output", "empty.out"]) == EXIT_OK
        assert (in_run / "empty.out").read_text() == ""

    def test_segment(self, in_run):
        rc = main(["segment", "--config", "run.ini", "--target", "train.tgt", "--source", "train.src",
                   "--output", "vit.seg"])
        assert rc == EXIT_OK
        segs = (in_run / "vit.seg").read_text().splitlines()
        assert [s.replace("-", "") for s in segs] == (in_run / "train.tgt").read_text().splitlines()

    def test_segment_needs_source(self, in_run):
        assert main(["segment", "--config", "run.ini", "--target", "train.tgt"]) == EXIT_USAGE

    def test_missing_checkpoint(self, in_run):
        assert main(["translate", "--config", "run.ini", "--input", "train.src",
                     "--checkpoint", "nope.ckpt"]) == EXIT_DATA

    def test_resume(self, in_run):
        assert main(["train", "--config", "run.ini", "--checkpoint_dir", "ck2", "--max_epochs", "1"]) == EXIT_OK
        assert main(["train", "--config", "run.ini", "--checkpoint_dir", "ck2", "--max_epochs", "2",
                     "--resume"]) == EXIT_OK
        resumed = [json.loads(x) for x in (in_run / "ck2" / "train_log.jsonl").read_text().splitlines()]
        full = [json.loads(x) for x in (in_run / "ck" / "train_log.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in resumed] == [1, 2]
        assert resumed[1]["train_loss"] == pytest.approx(full[1]["train_loss"], rel=1e-6)


class TestEvalAndSplit:
    def test_eval_chrf(self, in_run, capsys):
        assert main(["eval", "chrf", "--hyp", "train.tgt", "--ref", "train.tgt", "--report", "r.json"]) == EXIT_OK
        rep = json.loads((in_run / "r.json").read_text())
        assert rep["value"] == 100.0 and rep["exact_match"] == 1.0
        assert (in_run / "r.json.manifest.json").is_file()

    def test_eval_boundary(self, in_run, capsys):
        assert main(["eval", "boundary", "--pred", "train.seg", "--gold", "train.seg"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["f1"] == 100.0

    def test_eval_length_mismatch(self, in_run, tmp_path):
        (tmp_path / "h").write_text("a\n")
        assert main(["eval", "chrf", "--hyp", str(tmp_path / "h"), "--ref", "train.tgt"]) == EXIT_DATA

    def test_split(self, in_run, capsys):
        rc = main(["split", "--train-seg", "train.seg", "--test-seg", "train.seg", "--test-src", "train.src",
                   "--target-dc", "0.1", "--size", "10", "--k", "5", "--out", "split"])
        assert rc == EXIT_OK
        idx = [int(x) for x in (in_run / "split" / "indices.txt").read_text().split()]
        assert len(idx) == 10 == len(set(idx))
        src = (in_run / "train.src").read_text().splitlines()
        assert (in_run / "split" / "subset.src").read_text().splitlines() == [src[i] for i in idx]
        summary = json.loads((in_run / "split" / "summary.json").read_text())
        assert summary["subset_size"] == 10

    def test_split_too_large(self, in_run):
        assert main(["split", "--train-seg", "train.seg", "--test-seg", "train.seg", "--target-dc", "0.1",
                     "--size", "1000", "--out", "split2"]) == EXIT_DATA
