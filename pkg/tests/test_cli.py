import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from koala.cli import main
from koala.config import minimal_config
from koala.datapipe import write_jsonl

from conftest import small_config


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Small end-to-end run: base pretraining plus finetuning, shared by the tests below."""
    d = tmp_path_factory.mktemp("cli")
    cfg = small_config(**{"train.pretrain_steps": 4, "train.pretrain_batch": 4, "train.steps": 4,
                          "train.batch_size": 4, "train.base_checkpoint": str(d / "run" / "base"),
                          "eval.checkpoint": str(d / "run" / "koala")})
    path = d / "run.cfg"
    path.write_text(cfg.to_text())
    assert main(["pretrain-base", "--config", str(path), "--out", str(d / "run")]) == 0
    assert main(["finetune", "--config", str(path), "--out", str(d / "run")]) == 0
    return d, path


def test_pretrain_and_finetune_outputs(run):
    d, _ = run
    rows = _rows(d / "run" / "metrics.csv")
    assert rows[0] == ["step", "loss", "lr"] and len(rows) == 5
    manifest = json.loads((d / "run" / "base" / "manifest.json").read_text())
    assert all(e["frozen"] for e in manifest["params"])


def test_pretrain_is_reproducible(run, tmp_path):
    d, path = run
    assert main(["pretrain-base", "--config", str(path), "--out", str(tmp_path)]) == 0
    a = json.loads((d / "run" / "summary.json").read_text())
    b = json.loads((tmp_path / "summary.json").read_text())
    assert a["checksum"] == b["checksum"]
    assert (d / "run" / "base" / "params.koat").read_bytes() == (tmp_path / "base" / "params.koat").read_bytes()


def test_eval_reports(run, tmp_path):
    _, path = run
    assert main(["eval", "--config", str(path), "--out", str(tmp_path)]) == 0
    preds = _rows(tmp_path / "predictions.csv")
    assert preds[0] == ["id", "pred", "score0", "score1", "score2", "score3"]
    summary = _rows(tmp_path / "summary.csv")
    assert summary[0] == ["task", "accuracy", "n"]
    n = sum(int(r[2]) for r in summary[1:])
    assert len(preds) - 1 == n == 8 + 8


def test_no_visual_scores_ignore_the_video(run, tmp_path):
    d, path = run
    items = [{"id": f"q{i}", "question": "what is happening in the video?",
              "options": ["make a bike", "fix a lamp", "pack a shelf"], "answer": 0,
              "video_id": vid} for i, vid in enumerate(["test00000", "test00001", "twin0000a"])]
    write_jsonl(tmp_path / "items.jsonl", items)
    cfg = path.read_text() + f"eval.items = {tmp_path / 'items.jsonl'}\n"
    (tmp_path / "nv.cfg").write_text(cfg)
    assert main(["eval", "--config", str(tmp_path / "nv.cfg"), "--mode", "no_visual",
                 "--out", str(tmp_path)]) == 0
    scores = [r[2:] for r in _rows(tmp_path / "predictions.csv")[1:]]
    assert scores[0] == scores[1] == scores[2]


def test_missing_answers_omit_accuracy(run, tmp_path):
    _, path = run
    items = [{"id": "q", "question": "what is happening in the video?",
              "options": ["make a bike", "fix a lamp"], "video_id": "test00000"}]
    write_jsonl(tmp_path / "items.jsonl", items)
    (tmp_path / "c.cfg").write_text(path.read_text() + f"eval.items = {tmp_path / 'items.jsonl'}\n")
    assert main(["eval", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path)]) == 0
    assert _rows(tmp_path / "summary.csv")[1] == ["items", "", "1"]
    assert len(_rows(tmp_path / "predictions.csv")) == 2


def test_export_attention(run, tmp_path):
    _, path = run
    assert main(["export-attn", "--config", str(path), "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "attention.json").read_text())
    cfg = small_config()
    m = cfg.model
    assert len(doc["cs"]) == m.qformer_layers * m.segments and len(doc["cv"]) == m.qformer_layers
    for e in doc["cs"]:
        w = np.array(e["weights"])
        assert w.shape == (2 * m.n_queries, m.segment_frames * m.patches)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-5)
    for e in doc["cv"]:
        w = np.array(e["weights"])
        assert w.shape == (2 * m.n_queries, m.segments * m.n_queries)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-5)
    assert main(["export-attn", "--config", str(path), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "attention.json").read_bytes() == (tmp_path / "again" / "attention.json").read_bytes()


def test_ablate_rows(run, tmp_path):
    _, path = run
    (tmp_path / "a.cfg").write_text(path.read_text() + "eval.variants = base,base+cs+cv,average\n")
    assert main(["ablate", "--config", str(tmp_path / "a.cfg"), "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "ablation.csv")
    assert rows[0] == ["variant", "aggregation", "test_accuracy", "twin_accuracy", "train_steps",
                       "wall_seconds"]
    assert [r[0] for r in rows[1:]] == ["base", "base+cs+cv", "average"]
    assert [r[4] for r in rows[1:]] == ["0", "4", "4"]
    # average cannot tell twins apart: tied scores, tie-break picks option 0
    assert float(rows[3][3]) == 0.5


def test_gradcheck_exit_codes(tmp_path):
    path = tmp_path / "min.cfg"
    path.write_text(minimal_config().to_text())
    assert main(["gradcheck", "--config", str(path), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "gradcheck.json").read_text())
    assert rep["passed"] and rep["max_rel_err"] <= 1e-4
    path.write_text(minimal_config(**{"eval.gradcheck_tol": 0.0}).to_text())
    assert main(["gradcheck", "--config", str(path), "--out", str(tmp_path)]) == 1


def test_bad_inputs_exit_2(tmp_path, capsys):
    assert main(["eval", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.cfg").write_text("model.width = banana\n")
    assert main(["eval", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path)]) == 2
    (tmp_path / "ok.cfg").write_text("eval.checkpoint = /nonexistent\n")
    assert main(["eval", "--config", str(tmp_path / "ok.cfg"), "--out", str(tmp_path)]) == 2
    assert main(["finetune", "--config", str(tmp_path / "ok.cfg"), "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--config", "x"])
    assert exc.value.code == 2
    assert "error" in capsys.readouterr().err


def test_installed_entry_point(tmp_path):
    path = tmp_path / "min.cfg"
    path.write_text(minimal_config().to_text())
    out = subprocess.run([sys.executable, "-m", "koala.cli", "gradcheck", "--config", str(path),
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert out.returncode == 0 and "max relative error" in out.stdout
