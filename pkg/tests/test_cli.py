import json
import subprocess
import sys

import pytest

from sentorder import cli
from sentorder import data as D

SMALL = ["--set", "model.d_word=8", "--set", "model.d_hidden=12", "--set", "model.d_mlp=8",
         "--set", "model.read_cycles=2", "--epochs", "2", "--lr", "0.01"]


@pytest.fixture(autouse=True)
def runs_root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUNS_ENV, str(tmp_path / "runs"))
    return tmp_path / "runs"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corp = root / "corp"
    assert cli.main(["synth", "--out", str(corp), "--n-train", "60", "--n-validation", "10",
                     "--n-test", "10", "--seed", "1"]) == 0
    run = root / "run"
    assert cli.main(["train", "--train", str(corp / "train.jsonl"), "--validation",
                     str(corp / "validation.jsonl"), "--run-dir", str(run), *SMALL]) == 0
    return corp, run


def last_json(capsys):
    return [json.loads(line) for line in capsys.readouterr().out.splitlines() if line.startswith("{")]


def test_train_writes_run_directory(trained):
    corp, run = trained
    assert (run / "best" / "manifest.json").exists() and (run / "latest" / "manifest.json").exists()
    assert len((run / "train_log.jsonl").read_text().splitlines()) == 2
    assert "d_hidden: 12" in (run / "run_config.yaml").read_text()


def test_default_run_dir_is_config_digest(trained, runs_root, capsys):
    corp, _ = trained
    args = ["train", "--train", str(corp / "train.jsonl"), "--validation", str(corp / "validation.jsonl"),
            "--test", str(corp / "test.jsonl"), *SMALL, "--epochs", "1"]
    assert cli.main(args) == 0
    out = last_json(capsys)[-1]
    assert out["run_dir"].startswith(str(runs_root / "run-"))
    metrics = json.loads((runs_root / out["run_dir"].rsplit("/", 1)[1] / "metrics.json").read_text())
    assert 0 <= metrics["accuracy"] <= 1


def test_missing_corpus_exits_2_without_run_dir(tmp_path, runs_root):
    code = cli.main(["train", "--train", str(tmp_path / "nope.jsonl"), "--validation",
                     str(tmp_path / "nope.jsonl"), *SMALL])
    assert code == 2 and not runs_root.exists()


@pytest.mark.parametrize("args", [
    ["train", "--bogus"],
    ["train", "--set", "model.colour=red"],
    ["train", "--set", "nonsense"],
    ["train", "--set", "model.scorer=cosine"],
    ["order", "--checkpoint", "x", "--input", "y", "--beam", "0"],
])
def test_usage_and_config_errors_exit_1(args):
    assert cli.main(args) == 1


def test_bad_yaml_config(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model: [unclosed\n")
    assert cli.main(["train", "--config", str(cfg)]) == 1


def test_precedence_flags_over_set_over_file(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train: {lr: 0.5, max_epochs: 3}\nrun: {seed: 4}\n")
    rc = cli.resolve_config(cfg, ["train.lr=0.25", "run.seed=5"], train__max_epochs=None, run__seed=6)
    assert rc.train["lr"] == 0.25 and rc.train["max_epochs"] == 3 and rc.run["seed"] == 6


def _strip(path):
    return [{k: v for k, v in json.loads(line).items() if k != "wall_time"}
            for line in path.read_text().splitlines()]


def test_same_seed_same_run(trained, tmp_path):
    corp, _ = trained
    logs = []
    for name in ("a", "b"):
        assert cli.main(["train", "--train", str(corp / "train.jsonl"), "--validation",
                         str(corp / "validation.jsonl"), "--run-dir", str(tmp_path / name),
                         "--seed", "7", *SMALL]) == 0
        logs.append(_strip(tmp_path / name / "train_log.jsonl"))
    assert logs[0] == logs[1]
    a = sorted((tmp_path / "a" / "best").rglob("*.bin"))
    b = sorted((tmp_path / "b" / "best").rglob("*.bin"))
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_order_single_sentence_and_beam_monotone(trained, tmp_path, capsys):
    corp, run = trained
    inp = tmp_path / "in.jsonl"
    D.write_corpus([D.RawDocument("solo", ["first w001 ."]),
                    D.RawDocument("multi", ["third w002 .", "first w003 .", "second w004 .", "fourth w005 ."])],
                   inp)
    before = inp.read_bytes()
    scores = {}
    for beam in (1, 100):
        capsys.readouterr()
        assert cli.main(["order", "--checkpoint", str(run / "best"), "--input", str(inp),
                         "--beam", str(beam)]) == 0
        out = {r["id"]: r for r in last_json(capsys)}
        assert out["solo"]["order"] == [0]
        assert sorted(out["multi"]["order"]) == [0, 1, 2, 3]
        scores[beam] = out["multi"]["score"]
    assert scores[100] >= scores[1]
    assert inp.read_bytes() == before


def test_eval_predictors(trained, capsys):
    corp, run = trained
    assert cli.main(["eval", "--predictor", "oracle", "--input", str(corp / "test.jsonl")]) == 0
    assert last_json(capsys)[-1]["accuracy"] == 1.0
    assert cli.main(["eval", "--checkpoint", str(run / "best"), "--input", str(corp / "test.jsonl"),
                     "--beam", "4", "--permutations", "3"]) == 0
    metrics = json.loads((run / "metrics.json").read_text())
    assert len(metrics["records"]) == 10 and metrics["discrimination"]["pairs"] == 30


def test_eval_model_requires_checkpoint(trained):
    corp, _ = trained
    assert cli.main(["eval", "--input", str(corp / "test.jsonl")]) == 1


def test_discriminate_identical_is_tie(trained, tmp_path, capsys):
    corp, run = trained
    out = tmp_path / "d.json"
    assert cli.main(["discriminate", "--checkpoint", str(run / "best"), "--input", str(corp / "test.jsonl"),
                     "--against", str(corp / "test.jsonl"), "--out", str(out)]) == 0
    pairs = json.loads(out.read_text())["pairs"]
    assert len(pairs) == 10 and all(p["choice"] == "tie" for p in pairs)


def test_salience_single_sentence_writes_empty_output(trained, tmp_path, caplog):
    _, run = trained
    inp, out = tmp_path / "in.jsonl", tmp_path / "s.jsonl"
    D.write_corpus([D.RawDocument("solo", ["first w001 ."])], inp)
    assert cli.main(["salience", "--checkpoint", str(run / "best"), "--input", str(inp),
                     "--out", str(out)]) == 0
    assert out.read_text() == "" and "single sentence" in caplog.text


def test_salience_html_and_export(trained, tmp_path):
    corp, run = trained
    html = tmp_path / "s.html"
    assert cli.main(["salience", "--checkpoint", str(run / "best"), "--input", str(corp / "test.jsonl"),
                     "--format", "html", "--out", str(html)]) == 0
    assert html.read_text().count("<div class='salience'") == 10
    emb = tmp_path / "e.jsonl"
    assert cli.main(["export-embeddings", "--checkpoint", str(run / "best"), "--input",
                     str(corp / "test.jsonl"), "--out", str(emb)]) == 0
    recs = [json.loads(line) for line in emb.read_text().splitlines()]
    assert all(len(r["embedding"]) == 12 for r in recs)


def test_corrupt_checkpoint_exits_2(trained, tmp_path):
    import shutil
    corp, run = trained
    bad = tmp_path / "bad"
    shutil.copytree(run / "best", bad)
    f = bad / "params" / "embedding.bin"
    f.write_bytes(f.read_bytes()[:-1])
    assert cli.main(["order", "--checkpoint", str(bad), "--input", str(corp / "test.jsonl")]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sentorder", "synth", "--out", str(tmp_path / "c"),
                           "--n-train", "3", "--n-validation", "2", "--n-test", "2"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["documents"] == {"train": 3, "validation": 2, "test": 2}
    proc = subprocess.run([sys.executable, "-m", "sentorder", "frobnicate"], capture_output=True)
    assert proc.returncode == 1
