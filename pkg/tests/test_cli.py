import csv
import json

import numpy as np
import pytest

from ctxmix.cli import main
from ctxmix.data import Number, is_attractor, load_dataset
from ctxmix.weights_io import load_weights


def run(*argv):
    return main([str(a) for a in argv])


def _rows(path):
    with open(path, encoding="utf-8") as fh:
        assert fh.readline().startswith("# seed: ")
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--n", 40, "--seed", 3, "--out-dir", d) == 0
    assert run("init-model", "--out", d / "w.bin", "--layers", 2, "--heads", 2, "--dim", 16, "--ffn-dim", 32) == 0
    return d


def test_gen_data_deterministic_and_summary(tmp_path, capsys, vocab):
    for sub in ("a", "b"):
        assert run("gen-data", "--n", 30, "--seed", 5, "--out-dir", tmp_path / sub) == 0
    for name in ("train", "test"):
        assert (tmp_path / "a" / f"{name}.jsonl").read_bytes() == (tmp_path / "b" / f"{name}.jsonl").read_bytes()
    out = capsys.readouterr().out.splitlines()
    ds = load_dataset(tmp_path / "a" / "train.jsonl")
    sg = sum(ex.number_label is Number.SINGULAR for ex in ds)
    att = sum(any(is_attractor(vocab, t, ex.number_label) for t in ex.token_ids) for ex in ds)
    assert out[0] == f"train: 30 examples, singular={sg}, plural={30 - sg}, attractors={att}"


def test_gen_data_without_attractors(tmp_path, capsys):
    assert run("gen-data", "--n", 25, "--attractor-rate", 0, "--out-dir", tmp_path) == 0
    assert all(line.endswith("attractors=0") for line in capsys.readouterr().out.splitlines())


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CTXMIX_OUTPUT_DIR", str(tmp_path / "env"))
    assert run("gen-data", "--n", 4) == 0
    assert (tmp_path / "env" / "train.jsonl").exists()


def test_train_zero_steps_keeps_checkpoint(workspace, tmp_path):
    out = tmp_path / "ft.bin"
    assert run("train", "--weights", workspace / "w.bin", "--data", workspace / "train.jsonl", "--out", out,
               "--max-steps", 0) == 0
    a, b = load_weights(workspace / "w.bin").named_tensors(), load_weights(out).named_tensors()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    assert (tmp_path / "ft.report.csv").read_text().startswith("# seed: 0\n")


def test_unknown_method_lists_valid_names(workspace, tmp_path, capsys):
    code = run("score", "--weights", workspace / "w.bin", "--data", workspace / "test.jsonl", "--method", "lime",
               "--out-dir", tmp_path)
    err = capsys.readouterr().err
    assert code == 2
    assert "'lime'" in err and "value_zeroing" in err and "blank_out" in err


@pytest.mark.parametrize(
    "argv, artifact",
    [
        (["score", "--weights", "{d}/nope.bin", "--data", "{d}/test.jsonl", "--method", "attn"], "weights"),
        (["eval", "faithfulness", "--data", "{d}/test.jsonl", "--weights", "{d}/w.bin"], "scores directory"),
        (["eval", "cue-alignment", "--data", "{d}/test.jsonl", "--scores-dir", "{d}", "--method", "ig"],
         "score file for 'ig'"),
        (["eval", "probing", "--data", "{d}/test.jsonl"], "weights"),
    ],
)
def test_missing_artifacts_named(workspace, tmp_path, capsys, argv, artifact):
    argv = [a.format(d=workspace) for a in argv] + ["--out-dir", str(tmp_path)]
    assert run(*argv) == 2
    err = capsys.readouterr().err
    assert "missing required artifact" in err and artifact in err


def test_score_rollout_rows_stochastic(workspace, tmp_path):
    assert run("score", "--weights", workspace / "w.bin", "--data", workspace / "test.jsonl", "--method", "attn",
               "--aggregate", "rollout", "--limit", 5, "--out-dir", tmp_path) == 0
    recs = [json.loads(l) for l in (tmp_path / "scores_attn.jsonl").read_text().splitlines()]
    assert len(recs) == 5
    for rec in recs:
        assert len(rec["rollout"]) == 2
        for mat in rec["rollout"]:
            np.testing.assert_allclose(np.sum(mat, axis=1), 1.0, atol=1e-9)


def test_value_zeroing_all_layers_and_csv(workspace, tmp_path):
    assert run("score", "--weights", workspace / "w.bin", "--data", workspace / "test.jsonl", "--method",
               "value_zeroing", "--layer", "all", "--limit", 3, "--out-dir", tmp_path) == 0
    recs = [json.loads(l) for l in (tmp_path / "scores_value_zeroing.jsonl").read_text().splitlines()]
    for rec in recs:
        assert sorted(rec["layers"]) == ["1", "2"]
        n = len(rec["tokens"])
        assert all(np.shape(v["map"]) == (n, n) for v in rec["layers"].values())
    rows = _rows(tmp_path / "scores_value_zeroing.csv")
    assert {r["layer"] for r in rows} == {"1", "2", "aggregated"}


def test_rand_reproducible(workspace, tmp_path):
    for sub in ("a", "b"):
        assert run("score", "--weights", workspace / "w.bin", "--data", workspace / "test.jsonl", "--method", "rand",
                   "--seed", 11, "--limit", 6, "--out-dir", tmp_path / sub) == 0
    assert (tmp_path / "a" / "scores_rand.csv").read_bytes() == (tmp_path / "b" / "scores_rand.csv").read_bytes()


def _one_hot_scores(dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        for i, ex in enumerate(dataset):
            vec = np.zeros(ex.n)
            vec[ex.cue_positions[0]] = 1.0
            rec = {"index": i, "method": "oracle", "seed": 0, "mask_position": ex.mask_position, "tokens": [],
                   "layers": {"1": {"row": vec.tolist()}}, "aggregated": vec.tolist()}
            fh.write(json.dumps(rec) + "\n")


def test_cue_alignment_of_one_hot_scores(workspace, tmp_path):
    ds = load_dataset(workspace / "test.jsonl")
    _one_hot_scores(ds, tmp_path / "scores_oracle.jsonl")
    assert run("eval", "cue-alignment", "--data", workspace / "test.jsonl", "--scores-dir", tmp_path,
               "--out-dir", tmp_path) == 0
    rows = _rows(tmp_path / "cue_alignment.csv")
    dots = [float(r["value"]) for r in rows if r["metric"] == "dot"]
    assert dots and all(d == pytest.approx(1.0) for d in dots)
    probes = [float(r["value"]) for r in rows if r["metric"] == "probes_needed"]
    assert all(p == 0 for p in probes)
    assert (tmp_path / "cue_alignment_dot.svg").read_text().lstrip().startswith("<?xml")


def test_blank_out_is_perfectly_faithful_to_itself(workspace, tmp_path):
    assert run("score", "--weights", workspace / "w.bin", "--data", workspace / "test.jsonl", "--method", "blank_out",
               "--limit", 12, "--out-dir", tmp_path) == 0
    assert run("eval", "faithfulness", "--data", workspace / "test.jsonl", "--weights", workspace / "w.bin",
               "--scores-dir", tmp_path, "--out-dir", tmp_path) == 0
    rows = {(r["method"], r["metric"]): r["value"] for r in _rows(tmp_path / "faithfulness.csv")}
    assert float(rows[("blank_out", "mean_rho")]) == pytest.approx(1.0)


def test_eval_subsets_scored_examples(workspace, tmp_path):
    # scoring a prefix of the dataset must still line up example by example
    assert run("score", "--weights", workspace / "w.bin", "--data", workspace / "test.jsonl", "--method", "attn",
               "--method", "blank_out", "--limit", 7, "--out-dir", tmp_path) == 0
    assert run("eval", "faithfulness", "--data", workspace / "test.jsonl", "--weights", workspace / "w.bin",
               "--scores-dir", tmp_path, "--out-dir", tmp_path) == 0
    assert run("eval", "cue-alignment", "--data", workspace / "test.jsonl", "--scores-dir", tmp_path,
               "--out-dir", tmp_path) == 0
    per_ex = _rows(tmp_path / "faithfulness_examples.csv")
    assert len(per_ex) == 2 * 7


def test_probing_writes_csv_and_svg(workspace, tmp_path):
    assert run("eval", "probing", "--data", workspace / "test.jsonl", "--weights", workspace / "w.bin",
               "--layer", 1, "--out-dir", tmp_path) == 0
    rows = _rows(tmp_path / "probing.csv")
    assert {r["metric"] for r in rows} >= {"mdl_bits", "compression", "N", "K"}
    assert (tmp_path / "compression.svg").exists()


def test_export_formats(workspace, tmp_path):
    assert run("score", "--weights", workspace / "w.bin", "--data", workspace / "test.jsonl", "--method",
               "value_zeroing", "--aggregate", "rollout", "--limit", 2, "--out-dir", tmp_path) == 0
    assert run("export", "--scores", tmp_path / "scores_value_zeroing.jsonl", "--example", 1, "--format", "csv",
               "--format", "svg", "--format", "json", "--out-dir", tmp_path / "x") == 0
    names = {p.name for p in (tmp_path / "x").iterdir()}
    assert {"example1.json", "example1_value_zeroing_layer1.csv", "example1_value_zeroing_rollout2.svg"} <= names
    assert run("export", "--scores", tmp_path / "scores_value_zeroing.jsonl", "--example", 9,
               "--out-dir", tmp_path / "x") == 2
