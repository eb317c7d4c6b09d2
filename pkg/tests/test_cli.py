import json
import os
import subprocess
import sys

import numpy as np
import pytest

from mmk.cli import main
from mmk.data import load_corpus
from mmk.rigging import RiggedCandidate, write_candidate


def run(*argv):
    return main(list(argv))


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("corpus"))
    assert run("synth", "--seed", "7", "--n", "9", "--frames", "10", "--out", out) == 0
    return os.path.join(out, "corpus.mpk")


class TestSynth:
    def test_deterministic_bytes(self, tmp_path):
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        assert run("synth", "--seed", "7", "--n", "8", "--out", out1) == 0
        assert run("synth", "--seed", "7", "--n", "8", "--out", out2) == 0
        b1 = open(os.path.join(out1, "corpus.mpk"), "rb").read()
        b2 = open(os.path.join(out2, "corpus.mpk"), "rb").read()
        assert b1 == b2

    def test_config_echoed(self, tmp_path):
        out = str(tmp_path / "c")
        assert run("synth", "--seed", "3", "--n", "2", "--out", out) == 0
        report = read_json(os.path.join(out, "synth.json"))
        assert report["config"]["command"] == "synth"
        assert report["config"]["seed"] == 3
        assert report["records"] == 2

    def test_writes_only_inside_out_dir(self, tmp_path):
        out = tmp_path / "sandboxed"
        before = set(os.listdir(tmp_path))
        assert run("synth", "--seed", "1", "--n", "1", "--out", str(out)) == 0
        after = set(os.listdir(tmp_path))
        assert after - before == {"sandboxed"}


class TestEvaluate:
    def test_corpus_against_itself_fid_zero(self, corpus, tmp_path):
        out = str(tmp_path / "eval")
        assert run("evaluate", "--corpus", corpus, "--generated", corpus, "--out", out) == 0
        report = read_json(os.path.join(out, "evaluate.json"))
        assert abs(report["fid_k"]) < 1e-6
        assert abs(report["fid_g"]) < 1e-6
        assert report["bas"] is not None and 0.0 <= report["bas"] <= 1.0
        assert report["mm_dist"] is not None
        assert report["config"]["command"] == "evaluate"

    def test_full_pairs_mode(self, corpus, tmp_path):
        out = str(tmp_path / "eval2")
        assert run("evaluate", "--corpus", corpus, "--generated", corpus, "--out", out, "--full-pairs") == 0
        report = read_json(os.path.join(out, "evaluate.json"))
        assert report["div_k"] >= 0.0

    def test_missing_file_is_data_error(self, tmp_path):
        out = str(tmp_path / "eval3")
        code = run("evaluate", "--corpus", "/nonexistent.mpk", "--generated", "/nonexistent.mpk", "--out", out)
        assert code == 3

    def test_thread_cap_respected(self, corpus, tmp_path, monkeypatch):
        monkeypatch.setenv("MMK_THREADS", "1")
        out = str(tmp_path / "eval4")
        assert run("evaluate", "--corpus", corpus, "--generated", corpus, "--out", out) == 0

    def test_worker_count_does_not_change_results(self, corpus, tmp_path, monkeypatch):
        reports = []
        for threads in ("1", "4"):
            monkeypatch.setenv("MMK_THREADS", threads)
            out = str(tmp_path / f"eval_t{threads}")
            assert run("evaluate", "--corpus", corpus, "--generated", corpus, "--out", out) == 0
            report = read_json(os.path.join(out, "evaluate.json"))
            report["config"]["paths"] = None  # only the out dir differs
            reports.append(report)
        assert reports[0] == reports[1]


class TestMaskInspect:
    def test_default_ratio_masks_three_of_ten(self, corpus, tmp_path):
        out = str(tmp_path / "mi")
        assert run("mask-inspect", "--corpus", corpus, "--out", out, "--alpha-t", "0.3") == 0
        report = read_json(os.path.join(out, "mask_inspect.json"))
        assert len(report["plan"]["temporal_masked"]) == 3  # ceil(0.3 * 10)
        assert report["raw_map"] is not None
        rows = np.array(report["raw_map"])
        assert rows.sum(axis=1) == pytest.approx(np.ones(rows.shape[0]), abs=1e-5)

    def test_record_by_id(self, corpus, tmp_path):
        records = load_corpus(corpus)
        out = str(tmp_path / "mi2")
        assert run("mask-inspect", "--corpus", corpus, "--out", out, "--record", records[1].id) == 0
        report = read_json(os.path.join(out, "mask_inspect.json"))
        assert report["record"] == records[1].id
        assert report["modality"] == records[1].condition.modality.value

    def test_unknown_record_is_data_error(self, corpus, tmp_path):
        assert run("mask-inspect", "--corpus", corpus, "--out", str(tmp_path / "mi3"), "--record", "missing") == 3

    def test_baseline_strategy(self, corpus, tmp_path):
        out = str(tmp_path / "mi4")
        assert run("mask-inspect", "--corpus", corpus, "--out", out, "--strategy", "random", "--alpha-t", "0.5") == 0
        report = read_json(os.path.join(out, "mask_inspect.json"))
        assert len(report["plan"]["temporal_masked"]) == 5
        assert report["raw_map"] is None


class TestSelectRig:
    def test_end_to_end(self, tmp_path):
        cand_dir = tmp_path / "cands"
        cand_dir.mkdir()
        for i, s in enumerate([1.93, 1.78, 1.36, 1.06]):
            c = RiggedCandidate(points=np.array([[0.0, 0.0, 0.5]]), weights=np.array([[s]]), id=f"cand-{i}")
            write_candidate(c, str(cand_dir / f"cand{i}.rig"))
        out = str(tmp_path / "rig")
        assert run("select-rig", "--candidates", str(cand_dir), "--out", out) == 0
        report = read_json(os.path.join(out, "select_rig.json"))
        assert report["chosen"] == "cand-3"
        assert report["config"]["command"] == "select-rig"

    def test_empty_dir_is_data_error(self, tmp_path):
        empty = tmp_path / "none"
        empty.mkdir()
        assert run("select-rig", "--candidates", str(empty), "--out", str(tmp_path / "rig2")) == 3


class TestTrainAndGenerate:
    def test_full_pipeline_small(self, tmp_path):
        base = str(tmp_path)
        assert run("synth", "--seed", "5", "--n", "6", "--out", base) == 0
        corpus = os.path.join(base, "corpus.mpk")
        assert run("train-vq", "--corpus", corpus, "--out", base, "--steps", "30", "--batch", "4") == 0
        vq = os.path.join(base, "tokenizer.tkz")
        assert run(
            "train-gen", "--corpus", corpus, "--vq", vq, "--out", base,
            "--steps", "12", "--batch", "3", "--d-model", "16",
        ) == 0
        gen = os.path.join(base, "generator.gen")
        assert run(
            "generate", "--corpus", corpus, "--vq", vq, "--gen", gen, "--out", base,
            "--rounds", "2", "--samples", "2",
        ) == 0
        generated = load_corpus(os.path.join(base, "generated.mpk"))
        assert len(generated) == 12  # 6 records x 2 samples
        assert generated[0].motion.data.shape == load_corpus(corpus)[0].motion.data.shape
        out_eval = os.path.join(base, "eval")
        assert run("evaluate", "--corpus", corpus, "--generated", os.path.join(base, "generated.mpk"), "--out", out_eval) == 0
        report = read_json(os.path.join(out_eval, "evaluate.json"))
        assert report["fid_k"] >= 0.0
        assert report["mmodality"] is not None  # two samples share each caption

    def test_generate_deterministic(self, tmp_path):
        base = str(tmp_path)
        assert run("synth", "--seed", "2", "--n", "3", "--out", base) == 0
        corpus = os.path.join(base, "corpus.mpk")
        assert run("train-vq", "--corpus", corpus, "--out", base, "--steps", "10", "--batch", "2") == 0
        vq = os.path.join(base, "tokenizer.tkz")
        assert run("train-gen", "--corpus", corpus, "--vq", vq, "--out", base, "--steps", "4", "--batch", "2", "--d-model", "16") == 0
        gen = os.path.join(base, "generator.gen")
        for sub in ("g1", "g2"):
            assert run("generate", "--corpus", corpus, "--vq", vq, "--gen", gen, "--out", os.path.join(base, sub), "--rounds", "2") == 0
        b1 = open(os.path.join(base, "g1", "generated.mpk"), "rb").read()
        b2 = open(os.path.join(base, "g2", "generated.mpk"), "rb").read()
        assert b1 == b2


class TestExitCodes:
    def test_usage_error_is_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--n", "0", "--out", "/tmp/x"])
        assert exc.value.code == 2

    def test_unknown_flag_is_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--n", "2", "--out", "/tmp/x", "--bogus"])
        assert exc.value.code == 2

    def test_console_entry_point(self, tmp_path):
        result = subprocess.run(
            [sys.executable, "-m", "mmk.cli", "synth", "--seed", "1", "--n", "1", "--out", str(tmp_path / "o")],
            capture_output=True,
            text=True,
        )
        assert result.returncode == 0, result.stderr

    def test_data_error_message_on_stderr(self, capsys):
        code = main(["train-vq", "--corpus", "/does/not/exist.mpk", "--out", "/tmp/x"])
        assert code == 3
        assert "error: data:" in capsys.readouterr().err
