import json
import os

import pytest

from cvaecap import __version__, cli
from cvaecap.corpus import load_corpus


def run(*argv):
    return cli.main([str(a) for a in argv])


def usage_error(*argv):
    with pytest.raises(SystemExit) as exc:
        run(*argv)
    return exc.value.code


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    old = os.getcwd()
    os.chdir(root)
    try:
        run("gen-corpus", "--out", "corpus", "--n-train", 80, "--n-val", 6, "--n-test", 8, "--seed", 1)
        run("train", "--corpus", "corpus", "--variant", "ag-cvae", "--epochs", 2, "--out", "ag.ckpt",
            "--log", "ag.log")
        run("train", "--corpus", "corpus", "--variant", "lstm-baseline", "--epochs", 1, "--out", "lstm.ckpt")
    finally:
        os.chdir(old)
    return root


@pytest.fixture
def in_work(work):
    old = os.getcwd()
    os.chdir(work)
    yield work
    os.chdir(old)


def read_lines(path):
    return [json.loads(line) for line in open(path, encoding="utf-8")]


def test_gen_corpus_default_and_reproducible(tmp_path, capsys):
    run("gen-corpus", "--out", tmp_path / "a")
    assert "train 2000" in capsys.readouterr().out
    run("gen-corpus", "--out", tmp_path / "b")
    for f in ("train.jsonl", "val.jsonl", "test.jsonl", "vocab.txt"):
        assert (tmp_path / "a" / f).exists()
    corpus = load_corpus(tmp_path / "a")
    assert len(corpus.vocab) > 3
    # outputs differ only in the echoed output path
    a = (tmp_path / "a" / "test.jsonl").read_text().splitlines()
    b = (tmp_path / "b" / "test.jsonl").read_text().splitlines()
    assert a[1:] == b[1:]
    assert json.loads(a[0])["tool_version"] == __version__


def test_gen_corpus_usage_errors(tmp_path):
    assert usage_error("gen-corpus", "--out", tmp_path / "x", "--n-test", 0) == 2
    assert usage_error("gen-corpus", "--out", tmp_path / "x", "--K", 1) == 2


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"version": 1, "seed": 5, "gen-corpus": {"n_train": 7, "n_val": 2, "n_test": 3}}))
    run("gen-corpus", "--config", cfg, "--out", tmp_path / "c", "--n-test", 4)
    corpus = load_corpus(tmp_path / "c")
    assert (len(corpus.train), len(corpus.val), len(corpus.test)) == (7, 2, 4)
    assert corpus.config["seed"] == 5
    cfg.write_text(json.dumps({"gen-corpus": {"bogus": 1}}))
    assert usage_error("gen-corpus", "--config", cfg, "--out", tmp_path / "d") == 2


def test_train_artifacts_and_errors(in_work):
    log = read_lines("ag.log")
    assert log[0]["config"]["variant"] == "ag-cvae" and log[0]["tool_version"] == __version__
    assert [r["epoch"] for r in log[1:]] == [0, 1]
    assert usage_error("train", "--corpus", "corpus", "--variant", "bert", "--out", "x.ckpt") == 2
    assert usage_error("train", "--corpus", "missing", "--out", "x.ckpt") == 2


def test_train_resume_continues_epochs(in_work):
    run("train", "--corpus", "corpus", "--variant", "ag-cvae", "--resume", "ag.ckpt", "--epochs", 3,
        "--out", "ag3.ckpt")
    from cvaecap.training import load_checkpoint
    m = load_checkpoint("ag3.ckpt")
    assert m.epoch == 3 and [r["epoch"] for r in m.history] == [0, 1, 2]
    assert m.run_config["config"]["resume"] == "ag.ckpt"


def test_sample_counts_and_determinism(in_work):
    for out in ("s1.jsonl", "s2.jsonl"):
        run("sample", "--checkpoint", "ag.ckpt", "--corpus", "corpus", "--out", out, "--n-z", 20,
            "--test-std", 1.0, "--seed", 3)
    assert open("s1.jsonl", "rb").read().replace(b"s1.jsonl", b"") == open("s2.jsonl", "rb").read().replace(b"s2.jsonl", b"")
    header, *recs = read_lines("s1.jsonl")
    assert header["variant"] == "ag-cvae" and header["config"]["n_z"] == 20
    counts = {}
    for r in recs:
        counts[r["scene_id"]] = counts.get(r["scene_id"], 0) + 1
    assert len(counts) == 8 and set(counts.values()) == {20}


def test_sample_scene_ids_and_missing(in_work):
    run("sample", "--checkpoint", "ag.ckpt", "--corpus", "corpus", "--out", "one.jsonl", "--n-z", 3,
        "--test-std", 2, "--scene-ids", "81,82")
    assert {r["scene_id"] for r in read_lines("one.jsonl")[1:]} == {81, 82}
    assert usage_error("sample", "--checkpoint", "ag.ckpt", "--corpus", "corpus", "--out", "x.jsonl",
                       "--scene-ids", "9999") == 2
    assert usage_error("sample", "--checkpoint", "nope.ckpt", "--corpus", "corpus", "--out", "x.jsonl") == 2


def test_sample_baseline_ignores_latent_settings(in_work, caplog):
    with caplog.at_level("WARNING"):
        run("sample", "--checkpoint", "lstm.ckpt", "--corpus", "corpus", "--out", "lstm.jsonl", "--n-z", 4,
            "--beam-width", 3)
    assert "ignoring n_z" in caplog.text
    header, *recs = read_lines("lstm.jsonl")
    assert header["test_std"] is None
    assert all(r["provenance"].startswith("beam:") for r in recs)
    assert max(sum(r["scene_id"] == s for r in recs) for s in {r["scene_id"] for r in recs}) <= 3


def _reference_candidates(path, corpus):
    lines = [json.dumps({"format": cli.CAND_FORMAT, "version": 1, "variant": "references"})]
    for s in corpus.test:
        lines += [json.dumps({"scene_id": s.id, "provenance": f"ref:{i}", "tokens": r})
                  for i, r in enumerate(s.references)]
    path.write_text("\n".join(lines) + "\n")


def test_eval_self_references_and_rows(in_work, capsys):
    corpus = load_corpus("corpus")
    _reference_candidates(in_work / "refs.jsonl", corpus)
    run("sample", "--checkpoint", "ag.ckpt", "--corpus", "corpus", "--out", "ag.jsonl", "--n-z", 4,
        "--test-std", 1)
    run("eval", "--corpus", "corpus", "--candidates", "refs.jsonl", "ag.jsonl", "--out", "rep.jsonl",
        "--table", "rep.txt")
    header, *rows = read_lines("rep.jsonl")
    assert header["columns"] == ["B4", "B3", "B2", "B1", "C"] and header["tool_version"] == __version__
    assert len(rows) == 2
    assert rows[0]["model"] == "references" and rows[0]["oracle_B4"] == 1.0
    table = open("rep.txt").read()
    assert "B4" in table and "references" in table and "unique" in table


def test_eval_scene_mismatch(in_work):
    bad = in_work / "bad.jsonl"
    bad.write_text(json.dumps({"format": cli.CAND_FORMAT}) + "\n"
                   + json.dumps({"scene_id": 123456, "provenance": "z:0", "tokens": "a dog"}) + "\n")
    assert usage_error("eval", "--corpus", "corpus", "--candidates", bad, "--out", "r.jsonl") == 2


def test_control(in_work, capsys):
    rec = run("control", "--checkpoint", "ag.ckpt", "--corpus", "corpus", "--scene-id", 81, "--n-z", 6,
              "--out", "ctl.json")
    rec = read_lines("ctl.json")[0]
    assert rec["before"] == rec["after"] and rec["labels_before"] == rec["labels_after"]
    scene = load_corpus("corpus").scene(81)
    present = sorted(set(scene.detected))
    names = [c for c in ("dog", "cat", "car", "person", "boat", "pizza", "chair", "kite")]
    run("control", "--checkpoint", "ag.ckpt", "--corpus", "corpus", "--scene-id", 81,
        "--remove", names[present[0]], "--add", names[(present[0] + 1) % 8] if len(present) == 1 else "")
    assert "noun frequency" in capsys.readouterr().out
    everything = ",".join(names)
    assert usage_error("control", "--checkpoint", "ag.ckpt", "--corpus", "corpus", "--scene-id", 81,
                       "--remove", everything) == 2
    assert usage_error("control", "--checkpoint", "lstm.ckpt", "--corpus", "corpus", "--scene-id", 81) == 2
    assert usage_error("control", "--checkpoint", "ag.ckpt", "--corpus", "corpus", "--scene-id", 81,
                       "--add", "unicorn") == 2
