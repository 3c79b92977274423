import json

import pytest

from rxnlm.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_vocab_and_tokenize(capsys):
    code, out, err = run(capsys, "vocab")
    lines = out.splitlines()
    assert code == 0 and lines[0] == "token\tindex" and len(lines) == 203
    assert json.loads(err.strip())["command"] == "vocab"
    code, out, _ = run(capsys, "tokenize", "ClC", "--ids")
    assert code == 0 and out.splitlines()[1] == "ClC\t1 129 118 3"


def test_canon_file_input_and_data_error(capsys, tmp_path):
    f = tmp_path / "m.txt"
    f.write_text("OCC\nC1CC\n")
    code, out, _ = run(capsys, "canon", str(f))
    assert code == 0 and out.splitlines()[1:] == ["OCC\tCCO\tok", "C1CC\t\tinvalid"]
    assert run(capsys, "canon", "C1CC")[0] == 2


def test_usage_errors_exit_one(capsys):
    assert run(capsys, "nonsense")[0] == 1
    assert run(capsys, "plan", "--target", "CCO")[0] == 1
    assert run(capsys, "corpus", "split", "--ratios", "a,b", "--out", "x")[0] == 1


def test_missing_files_exit_two(capsys, tmp_path):
    assert run(capsys, "generate", "--model", str(tmp_path / "nope.ck"), "--input", "C")[0] == 2
    assert run(capsys, "pretrain", "--config", str(tmp_path / "none.toml"), "--out", str(tmp_path / "o"))[0] == 2


def test_corpus_split_writes_files_and_provenance(capsys, tmp_path):
    out = tmp_path / "split"
    code, stdout, _ = run(capsys, "corpus", "split", "--ratios", "9,1", "--seed", "3", "--out", str(out))
    assert code == 0 and stdout.splitlines()[1:] == ["train\t1080", "test\t120"]
    prov = json.loads((tmp_path / "split.provenance.json").read_text())
    assert prov["seed"] == 3 and prov["ratios"] == [9.0, 1.0]


def test_toy_plan(capsys, tmp_path):
    out = tmp_path / "route.json"
    code, stdout, _ = run(capsys, "plan", "--toy", "--target", "abcda", "--out", str(out))
    assert code == 0 and len(stdout.splitlines()) == 5
    assert json.loads(out.read_text())[0]["n_steps"] == 4


@pytest.mark.slow
def test_pretrain_generate_eval_inspect(capsys, tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[model]\nd_model = 16\nn_heads = 2\nn_encoder_layers = 1\nn_decoder_layers = 1\n"
                   "max_length = 160\n[train]\nn_steps = 3\nbatch_size = 8\n")
    data = tmp_path / "r.txt"
    data.write_text("CC.O>>CCO\nCBr.O>[Na+]>CO\nCC(=O)Cl.N>>CC(N)=O\n")
    ck = tmp_path / "lm.ck"
    assert run(capsys, "pretrain", "--config", str(cfg), "--corpus", str(data), "--seed", "2", "--out", str(ck))[0] == 0
    prov = json.loads((tmp_path / "lm.ck.provenance.json").read_text())
    assert prov["seed"] == 2 and len(prov["checkpoint_sha256"]) == 64
    code, out, _ = run(capsys, "generate", "--model", str(ck), "--input", "<msk>>>CCO", "--n", "2", "--max-new", "6")
    assert code == 0 and len(out.splitlines()) == 3
    code, out, _ = run(capsys, "eval", "--model", str(ck), "--data", str(data), "--k", "1,2", "--max-new", "6")
    assert code == 0 and out.splitlines()[1].startswith("top_1\t")
    assert run(capsys, "inspect", "distance", "C", "N", "--model", str(ck))[0] == 0
    code, out, _ = run(capsys, "inspect", "attention", "CC>>O", "--model", str(ck), "--kind", "cross")
    assert code == 0 and out.startswith("query\t<cls>")
    labels = tmp_path / "y.tsv"
    labels.write_text("text\tlabel\n" + "".join(f"{m}\t{i}\n" for i, m in enumerate(["CC", "CO", "CN", "CCl"])))
    head = tmp_path / "h.ck"
    assert run(capsys, "finetune", "--data", str(labels), "--base", str(ck), "--steps", "2", "--out", str(head))[0] == 0
    code, out, _ = run(capsys, "eval", "--head", str(head), "--data", str(labels))
    assert code == 0 and out.splitlines()[1].startswith("rmse\t")
