from __future__ import annotations

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from retrieval_ctr import cli
from retrieval_ctr.archive import Query, load_index, search
from retrieval_ctr.data import parse_log, read_targets
from retrieval_ctr.metrics import auc

SYNTH = "n_users = {n}\nT = 30\nW = 8\nn_items = 400\nn_categories = 20\nseed = 3\nrho = {rho}\n"
TRAIN = "lr_predictor = 0.05\nlr_selector = 0.01\nmomentum = 0.9\nmax_rounds = 2\ndim = 8\neval_batch = 500\n"


def invoke(capsys, *argv) -> tuple[int, str, str]:
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def synth(tmp, name, n=200, rho=0.9, seed=None):
    cfg = tmp / f"{name}.cfg"
    cfg.write_text(SYNTH.format(n=n, rho=rho))
    argv = ["synth", "--config", str(cfg), "--out", str(tmp / name)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    assert cli.main(argv) == 0
    return tmp / name


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    data = synth(tmp, "data")
    assert cli.main(["index", "--data", str(data)]) == 0
    (tmp / "train.cfg").write_text(TRAIN)
    assert cli.main(["train", "--data", str(data), "--config", str(tmp / "train.cfg"), "--out", str(tmp / "run")]) == 0
    return tmp, data, tmp / "run"


def report_rows(run):
    with open(run / cli.REPORT, newline="") as fh:
        return list(csv.DictReader(fh))


# -- synth / index -------------------------------------------------------------


def test_synth_minimal_round_trip(tmp_path):
    data = synth(tmp_path, "tiny", n=10)
    for f in (cli.LOG_FILE, cli.CATALOG_FILE, cli.MANIFEST, "train.csv", "valid.csv", "test.csv"):
        assert (data / f).exists()
    assert len(parse_log(data / cli.LOG_FILE)) == 10 * 30
    assert len(read_targets(data / "test.csv")) == 20
    manifest = json.loads((data / cli.MANIFEST).read_text())
    assert manifest["seed"] == 3 and manifest["config"]["n_users"] == 10


def test_synth_same_seed_byte_identical(tmp_path):
    a, b = synth(tmp_path, "a", n=10), synth(tmp_path, "b", n=10)
    for f in (cli.LOG_FILE, cli.CATALOG_FILE, "train.csv", "valid.csv", "test.csv", "hidden.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    c = synth(tmp_path, "c", n=10, seed=4)
    assert (a / cli.LOG_FILE).read_bytes() != (c / cli.LOG_FILE).read_bytes()


def test_synth_full_signal_oracle_on_emitted_labels(tmp_path):
    data = synth(tmp_path, "rho1", n=100, rho=1.0)
    hidden = {r["user"]: int(r["hidden_test"]) for r in csv.DictReader(open(data / "hidden.csv"))}
    test = read_targets(data / "test.csv")
    score = [float(next(t for t in x.item_tokens if t.startswith("category_")) == f"category_{hidden[x.user_token]}")
             for x in test]
    assert auc(score, [x.label for x in test]) == 1.0


def test_index_builds_targets_for_plain_log(tmp_path, capsys):
    src = synth(tmp_path, "src", n=20)
    plain = tmp_path / "plain"
    plain.mkdir()
    (plain / cli.LOG_FILE).write_bytes((src / cli.LOG_FILE).read_bytes())
    code, out, _ = invoke(capsys, "index", "--data", plain)
    assert code == 0 and "indexed" in out
    for f in (cli.INDEX_FILE, cli.VOCAB_FILE, "train.csv", "valid.csv", "test.csv"):
        assert (plain / f).exists()
    assert load_index(plain / cli.INDEX_FILE).total_docs == 20 * 30


def test_rejections_exit_nonzero(tmp_path, capsys):
    code, _, err = invoke(capsys, "index", "--data", tmp_path / "nothing")
    assert code == 2 and "log.csv" in err
    code, _, err = invoke(capsys, "train", "--data", tmp_path, "--out", tmp_path / "r")
    assert code == 2 and "index.txt" in err
    bad = tmp_path / "bad.cfg"
    bad.write_text("lr_selectr = 0.1\n")
    code, _, err = invoke(capsys, "synth", "--config", bad, "--out", tmp_path / "x")
    assert code == 2 and "lr_selectr" in err
    bad.write_text("rho = 2\n")
    assert invoke(capsys, "synth", "--config", bad, "--out", tmp_path / "x")[0] == 2
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / cli.LOG_FILE).write_text("user_id,item_id,timestamp\nu1,i1\n")
    code, _, err = invoke(capsys, "index", "--data", broken)
    assert code == 2 and "line 2" in err


# -- train / eval ----------------------------------------------------------------


def test_train_outputs_and_manifest(trained):
    tmp, data, run = trained
    for f in (cli.CHECKPOINT, cli.MODEL_CFG, cli.REPORT, cli.MANIFEST):
        assert (run / f).exists()
    assert not (run / (cli.MANIFEST + ".tmp")).exists()
    rows = report_rows(run)
    assert [r["phase"] for r in rows] == ["pretrain", "selector", "predictor", "selector", "predictor"]
    m = json.loads((run / cli.MANIFEST).read_text())
    assert m["config"]["mode"] == "ubr" and m["seed"] == 0
    assert m["inputs"][str(data / cli.INDEX_FILE)] == cli.git_hash(data / cli.INDEX_FILE)
    assert {"load", "pretrain"} <= set(m["timings"])


def test_git_hash_matches_git(tmp_path):
    p = tmp_path / "f.txt"
    p.write_bytes(b"hello\n")
    assert cli.git_hash(p) == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_eval_matches_best_report_row_and_repeats(trained, capsys):
    _, _, run = trained
    outs = [invoke(capsys, "eval", "--run", run, "--split", "valid") for _ in range(2)]
    assert outs[0] == outs[1] and outs[0][0] == 0
    header, values = outs[0][1].strip().splitlines()
    assert header == "auc,logloss,ne,rig"
    got = dict(zip(header.split(","), map(float, values.split(","))))
    m = json.loads((run / cli.MANIFEST).read_text())
    best = report_rows(run)[m["best_epoch"]]
    assert got["auc"] == float(best["auc"]) and got["logloss"] == float(best["logloss"])
    assert got["ne"] + got["rig"] == pytest.approx(1.0, abs=1e-12)


def test_eval_scores_file(tmp_path, capsys):
    p = tmp_path / "s.csv"
    p.write_text("target_id,score,label\n0,0.9,1\n1,0.2,0\n2,0.4,1\n3,0.4,0\n")
    code, out, _ = invoke(capsys, "eval", "--scores", p)
    vals = [float(v) for v in out.strip().splitlines()[1].split(",")]
    assert code == 0 and vals[0] == 0.875
    p.write_text("a,b\n1,2\n")
    assert invoke(capsys, "eval", "--scores", p)[0] == 2


def test_eval_rejects_mismatched_split(trained, tmp_path, capsys):
    _, data, run = trained
    lines = (data / "valid.csv").read_text().splitlines()
    # one context token instead of three
    cells = next(csv.reader([lines[1]]))
    cells[3] = cells[3].split()[0]
    bad = tmp_path / "bad.csv"
    with open(bad, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(lines[0].split(","))
        w.writerow(cells)
    code, _, err = invoke(capsys, "eval", "--run", run, "--targets", bad)
    assert code == 2 and "fields" in err


def test_mode_flag_and_reproducible_reports(trained, capsys):
    tmp, data, run = trained
    cfg = tmp / "train.cfg"
    assert invoke(capsys, "train", "--data", data, "--config", cfg, "--out", tmp / "again", "--mode", "ubr")[0] == 0
    assert (tmp / "again" / cli.REPORT).read_bytes() == (run / cli.REPORT).read_bytes()
    assert (tmp / "again" / cli.CHECKPOINT).read_bytes() == (run / cli.CHECKPOINT).read_bytes()
    # the manifest's config and seed alone reproduce the run
    assert invoke(capsys, "train", "--data", data, "--config", run / cli.MODEL_CFG, "--out", tmp / "re")[0] == 0
    assert (tmp / "re" / cli.REPORT).read_bytes() == (run / cli.REPORT).read_bytes()
    assert invoke(capsys, "train", "--data", data, "--config", cfg, "--out", tmp / "rn", "--mode", "recent_n")[0] == 0
    assert [r["phase"] for r in report_rows(tmp / "rn")] == ["pretrain", "predictor", "predictor"]


# -- retrieve / score ----------------------------------------------------------------


SECTIONS = ["== target", "== selection probabilities", "== query", "== retrieved", "== prediction"]


def parse_trace(text):
    lines = text.splitlines()
    heads = [next(i for i, l in enumerate(lines) if l.startswith(s)) for s in SECTIONS]
    return lines, heads


def test_retrieve_trace(trained, capsys):
    _, data, run = trained
    archive = load_index(data / cli.INDEX_FILE)
    engine, _ = cli.load_engine(run)
    for target in read_targets(data / "test.csv")[:15]:
        code, out, _ = invoke(capsys, "retrieve", "--run", run, "--target", target.target_id)
        assert code == 0
        lines, heads = parse_trace(out)
        assert heads == sorted(heads)
        body = lines[heads[3] + 2 : heads[4]]
        rows = [l.split("\t") for l in body if l and not l.startswith("alpha_sum")]
        alphas = np.array([float(r[4]) for r in rows])
        assert abs(alphas.sum() - 1.0) <= 1e-6
        # trace scores are the scores of a direct search with the printed query
        selected = [l.split("\t")[0] for l in lines[heads[1] + 1 : heads[2]] if l.endswith("selected")]
        res = search(archive, Query(target.user_token, tuple(selected)), engine.cfg.S, target.timestamp)
        assert [int(r[1]) for r in rows] == list(res.doc_ids)
        assert [float(r[3]) for r in rows] == [float(s) for s in res.scores]
        y_hat = float(lines[heads[4] + 1].split("\t")[1])
        assert 0 < y_hat < 1


def test_retrieve_matches_score(trained, capsys):
    _, data, run = trained
    code, out, _ = invoke(capsys, "score", "--run", run, "--targets", data / "test.csv")
    scored = dict(line.split("\t") for line in out.strip().splitlines())
    tid = read_targets(data / "test.csv")[4].target_id
    _, trace, _ = invoke(capsys, "retrieve", "--run", run, "--target", tid)
    assert trace.strip().splitlines()[-1] == f"y_hat\t{scored[str(tid)]}"
    assert len(scored) == len(read_targets(data / "test.csv"))


def test_retrieve_unknown_target(trained, capsys):
    _, _, run = trained
    code, _, err = invoke(capsys, "retrieve", "--run", run, "--target", 10**9)
    assert code == 2 and "unknown target" in err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "retrieval_ctr", "eval", "--run", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stderr.startswith("error:")
