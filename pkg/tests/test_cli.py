import json

import pytest

from odemil.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, build_parser, main, resolve
from odemil.corpus import manifest_path, read_corpus
from odemil.evaluation import read_results


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    p = tmp_path_factory.mktemp("c") / "corpus.jsonl"
    assert main(["datagen", "--out", str(p), "--dims", "1,2", "--instances", "2", "--count", "6",
                 "--sigma", "0.05", "--seed", "7"]) == EXIT_OK
    return p


def test_datagen(corpus, tmp_path):
    recs = read_corpus(corpus)
    assert len(recs) == 6 and all(r.n_instances == 2 and r.sigma == 0.05 for r in recs)
    m = json.loads(manifest_path(corpus).read_text())
    assert m["seed"] == 7 and m["records"] == 6 and "rejection_rate" in m["stats"]
    again = tmp_path / "again.jsonl"
    main(["datagen", "--out", str(again), "--dims", "1,2", "--instances", "2", "--count", "6",
          "--sigma", "0.05", "--seed", "7"])
    assert again.read_bytes() == corpus.read_bytes()


def test_oracle_predict_eval_report(corpus, tmp_path, capsys):
    pred, res, rep = tmp_path / "p.jsonl", tmp_path / "r.csv", tmp_path / "rep"
    assert main(["predict", "--corpus", str(corpus), "--out", str(pred), "--oracle",
                 "--sigmas", "0,0.05"]) == EXIT_OK
    # a row the parser rejects must be scored as a fail, not crash the run
    with open(pred, "a") as fh:
        fh.write(json.dumps({"id": 0, "method": "broken", "sigma": 0.0, "n_instances": 1,
                             "prefix": "add x0"}) + "\n")
    assert main(["eval", "--corpus", str(corpus), "--predictions", str(pred), "--out", str(res),
                 "--seed", "0"]) == EXIT_OK
    rows = read_results(res)
    truth = [r for r in rows if r["method"] == "truth"]
    assert len(truth) == 6 * 2 * 2 * 2 and all(r["passed"] or r["excluded"] for r in truth)
    assert [r["failure"] for r in rows if r["method"] == "broken"] == ["parse failure"] * 2
    assert manifest_path(res).exists()
    assert main(["report", "--results", str(res), "--out", str(rep)]) == EXIT_OK
    assert (rep / "accuracy_vs_instances.svg").exists() and (rep / "summary.md").exists()


def test_baseline_command(corpus, tmp_path):
    out = tmp_path / "bl"
    assert main(["baseline", "--corpus", str(corpus), "--out", str(out), "--sigmas", "0",
                 "--seed", "0", "--limit", "3"]) == EXIT_OK
    rows = read_results(out / "results.csv")
    assert {r["method"] for r in rows} == {"stlsq"} and len(rows) == 3 * 2 * 2
    assert (out / "predictions.jsonl").exists()


def test_train_and_resume(corpus, tmp_path):
    run = tmp_path / "run"
    base = ["train", "--corpus", str(corpus), "--out", str(run), "--batch-size", "3", "--warmup", "1",
            "--aggregator", "attentive"]
    assert main(base + ["--steps", "2"]) == EXIT_OK
    ckpt = run / "checkpoint.pt"
    assert ckpt.exists() and manifest_path(ckpt).exists()
    assert main(base + ["--steps", "4", "--resume", str(ckpt)]) == EXIT_OK
    log = (run / "train_log.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in log[1:]] == ["0", "1", "2", "3"]
    pred = tmp_path / "p.jsonl"
    assert main(["predict", "--corpus", str(corpus), "--checkpoint", str(ckpt), "--out", str(pred),
                 "--instances", "2", "--sigmas", "0", "--beam", "2", "--max-len", "10", "--limit", "2"]) == EXIT_OK
    rows = [json.loads(line) for line in pred.read_text().splitlines()]
    assert len(rows) == 2 and {r["method"] for r in rows} == {"attentive"}


def test_exit_codes(corpus, tmp_path, capsys):
    assert main(["datagen", "--out", str(tmp_path / "x.jsonl")]) == EXIT_CONFIG  # no seed
    assert main(["datagen", "--bogus"]) == EXIT_CONFIG
    assert main(["eval", "--corpus", str(tmp_path / "none.jsonl"), "--predictions", "p",
                 "--out", "o", "--seed", "0"]) == EXIT_DATA
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{broken\n")
    assert main(["train", "--corpus", str(bad), "--out", str(tmp_path / "r")]) == EXIT_DATA
    empty = tmp_path / "empty.csv"
    empty.write_text("system_id,method,dim,n_instances,sigma,task,r2,passed,excluded,failure\n")
    assert main(["report", "--results", str(empty), "--out", str(tmp_path / "rep")]) == EXIT_DATA
    assert main(["selftest"]) == EXIT_OK


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"steps": 50, "lr": 5e-4, "corpus": "from-file"}}))
    parser = build_parser()
    args = parser.parse_args(["--config", str(cfg), "train", "--steps", "7"])
    out = resolve(args, env={"ODEMIL_CORPUS": "from-env"})
    assert out["steps"] == 7          # flag beats file
    assert out["lr"] == 5e-4          # file beats default
    assert out["corpus"] == "from-env"  # environment beats file for paths
    assert out["batch_size"] == 16    # default
    assert resolve(parser.parse_args(["--config", str(cfg), "train"]), env={})["corpus"] == "from-file"
    flat = tmp_path / "flat.json"
    flat.write_text(json.dumps({"count": 3}))
    assert resolve(parser.parse_args(["--config", str(flat), "datagen"]), env={})["count"] == 3


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"stepz": 3}}))
    assert main(["--config", str(bad), "train"]) == EXIT_CONFIG
    assert main(["--config", str(tmp_path / "missing.json"), "train"]) == EXIT_CONFIG
