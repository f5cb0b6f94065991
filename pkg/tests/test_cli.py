import json
import os

import numpy as np
import pytest

from enbedkit import cli
from enbedkit.cli import ConfigKeyError, config_hash, main, resolve_config

TINY = [
    "--set", 'model.overrides={"d_model":32,"d_kv":8,"d_ff":64,'
             '"n_encoder_layers":2,"n_decoder_layers":1,"heads":2,'
             '"max_len":64,"r_small":4,"r_large":8,"k_blocks":2}',
]


def run(argv):
    return main([str(a) for a in argv])


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


@pytest.fixture()
def fasta(tmp_path):
    path = tmp_path / "in.fasta"
    path.write_bytes(b">chr1 demo\nACNNGT\n>chr2\n" + b"ACGT" * 600 + b"\n")
    return path


def file_bytes(root):
    out = {}
    for name in sorted(os.listdir(root)):
        with open(os.path.join(root, name), "rb") as fh:
            out[name] = fh.read()
    return out


# -- config machinery ------------------------------------------------------------

def test_resolve_config_rejects_unknown_keys(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus_section": {}}))

    class Args:
        config = str(bad)
        preset = None
        steps = None
        seed = None
        set = []

    with pytest.raises(ConfigKeyError, match="bogus_section"):
        resolve_config(Args())


def test_set_overrides_and_rejects_unknown():
    class Args:
        config = None
        preset = "toy"
        steps = 7
        seed = 3
        set = ["pretrain.crop_len=64", "paths.corpus=c.txt"]

    cfg = resolve_config(Args())
    assert cfg["pretrain"]["crop_len"] == 64
    assert cfg["pretrain"]["steps"] == 7
    assert cfg["seed"] == 3
    assert cfg["paths"]["corpus"] == "c.txt"

    Args.set = ["pretrain.nonsense=1"]
    with pytest.raises(ConfigKeyError):
        resolve_config(Args())


def test_config_hash_stable_and_sensitive():
    a = {"seed": 1, "x": {"y": 2}}
    assert config_hash(a) == config_hash(json.loads(json.dumps(a)))
    assert config_hash(a) != config_hash({"seed": 2, "x": {"y": 2}})


# -- corpus ------------------------------------------------------------------------

def test_cmd_corpus_stats(tmp_path, fasta, capsys):
    out = tmp_path / "out"
    assert run(["corpus", fasta, "--out", out]) == 0
    stats = read_json(out / "stats.json")
    assert stats["records"] == 2
    assert stats["segments"] == 2
    assert stats["total_bases"] == 4 + 2400
    assert stats["n_bases_removed"] == 2
    assert (out / "corpus.txt").exists()
    assert (out / "manifest.json").exists()
    assert "2 segments" in capsys.readouterr().out


def test_cmd_corpus_missing_file(tmp_path, capsys):
    code = run(["corpus", tmp_path / "nope.fa", "--out", tmp_path / "o"])
    assert code != 0
    assert "nope.fa" in capsys.readouterr().err


# -- pretrain ------------------------------------------------------------------------

def pretrain_args(tmp_path, out, fasta, steps=4, seed=5):
    corpus_dir = tmp_path / "corpus_dir"
    if not (corpus_dir / "corpus.txt").exists():
        assert run(["corpus", fasta, "--out", corpus_dir]) == 0
    return [
        "pretrain", "--out", out, "--seed", seed, "--steps", steps, *TINY,
        "--set", f"paths.corpus={corpus_dir / 'corpus.txt'}",
        "--set", "pretrain.crop_len=48",
        "--set", "pretrain.batch_size=2",
        "--set", "pretrain.eval_interval=2",
        "--set", "pretrain.eval_examples=2",
    ]


def test_cmd_pretrain_outputs(tmp_path, fasta):
    out = tmp_path / "run1"
    assert run(pretrain_args(tmp_path, out, fasta)) == 0
    assert (out / "checkpoint.json").exists()
    assert (out / "checkpoint.bin").exists()
    lines = (out / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "step,loss,lr,mlm_accuracy"
    assert len(lines) == 5  # header + 4 steps
    manifest = read_json(out / "manifest.json")
    assert manifest["seed"] == 5
    assert "metrics.csv" in manifest["artifacts"]


def test_cmd_pretrain_deterministic(tmp_path, fasta):
    out1, out2 = tmp_path / "d1", tmp_path / "d2"
    assert run(pretrain_args(tmp_path, out1, fasta)) == 0
    assert run(pretrain_args(tmp_path, out2, fasta)) == 0
    a, b = file_bytes(out1), file_bytes(out2)
    assert a["checkpoint.bin"] == b["checkpoint.bin"]
    assert a["checkpoint.json"] == b["checkpoint.json"]
    assert a["metrics.csv"] == b["metrics.csv"]
    assert a["manifest.json"] == b["manifest.json"]


def test_cmd_pretrain_resume_continues_step_counter(tmp_path, fasta):
    first = tmp_path / "first"
    assert run(pretrain_args(tmp_path, first, fasta)) == 0
    assert read_json(first / "checkpoint.json")["step"] == 4
    second = tmp_path / "second"
    argv = pretrain_args(tmp_path, second, fasta) + [
        "--set", f"paths.resume={first / 'checkpoint'}",
    ]
    assert run(argv) == 0
    assert read_json(second / "checkpoint.json")["step"] == 8
    lines = (second / "metrics.csv").read_text().strip().splitlines()
    assert lines[1].startswith("4,")  # resumed step numbering


# -- noise ----------------------------------------------------------------------------

def test_cmd_noise_make_balanced(tmp_path):
    out = tmp_path / "noise"
    argv = [
        "noise", "make", "--out", out, "--seed", 2,
        "--set", "noise.n_examples=20",
        "--set", "noise.reference_length=8192",
        "--set", "noise.read_len=96",
    ]
    assert run(argv) == 0
    rows = (out / "noise.tsv").read_bytes().strip().split(b"\n")
    assert len(rows) == 20
    labels = [int(r.split(b"\t")[1]) for r in rows]
    assert labels.count(0) == 10 and labels.count(1) == 10
    assert all(len(r.split(b"\t")[0]) == 96 for r in rows)


def test_cmd_noise_detect(tmp_path):
    # tiny fresh classifier checkpoint
    from enbedkit.model import build, toy_config

    model = build(toy_config(d_model=32, d_kv=8, d_ff=64, n_encoder_layers=2,
                             n_decoder_layers=1, heads=2, max_len=64,
                             r_small=4, r_large=8, k_blocks=2),
                  seed=1, n_classes=2)
    stem = tmp_path / "clf"
    model.save_checkpoint(stem, step=0)
    data = tmp_path / "data.tsv"
    data.write_bytes(b"ACGTACGT\t0\nTTTTAAAA\t1\n")
    out = tmp_path / "detect"
    argv = [
        "noise", "detect", "--out", out, "--seed", 2,
        "--set", f"paths.checkpoint={stem}",
        "--set", f"paths.dataset={data}",
    ]
    assert run(argv) == 0
    lines = (out / "predictions.tsv").read_text().strip().splitlines()
    assert lines[0] == "sequence\tlabel\tp_noise"
    assert len(lines) == 3
    for line in lines[1:]:
        p = float(line.split("\t")[2])
        assert 0.0 <= p <= 1.0
    assert (out / "report.json").exists()


# -- eval ------------------------------------------------------------------------------

def test_cmd_eval_identical_files(tmp_path, capsys):
    preds = tmp_path / "p.tsv"
    preds.write_bytes(b"ACGT\nGGTT\n")
    out = tmp_path / "eval"
    assert run(["eval", "--predictions", preds, "--truths", preds, "--out", out]) == 0
    report = read_json(out / "report.json")
    assert report["top1"] == 1.0 and report["top5"] == 1.0
    assert report["mean_ld"] == 0.0
    assert "top1=1.0000" in capsys.readouterr().out


def test_cmd_eval_length_mismatch(tmp_path):
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    a.write_bytes(b"ACGT\n")
    b.write_bytes(b"ACGT\nGG\n")
    assert run(["eval", "--predictions", a, "--truths", b, "--out", tmp_path / "x"]) == 1


# -- seq2seq + mutate -----------------------------------------------------------------------

def test_cmd_finetune_seq2seq_and_mutate(tmp_path):
    pairs = tmp_path / "pairs.tsv"
    rng = np.random.default_rng(0)
    base = np.frombuffer(b"ACGT", dtype=np.uint8)
    rows = []
    for _ in range(24):
        s = rng.choice(base, size=8).tobytes()
        rows.append(s + b"\t" + s)
    pairs.write_bytes(b"\n".join(rows) + b"\n")

    s2s_out = tmp_path / "s2s"
    argv = [
        "finetune-seq2seq", "--out", s2s_out, "--seed", 3, "--steps", 6, *TINY,
        "--set", f"paths.pairs={pairs}",
        "--set", "finetune.batch_size=2",
        "--set", "finetune.heldout_fraction=0.2",
    ]
    assert run(argv) == 0
    assert (s2s_out / "report.json").exists()

    # classifier checkpoint for ranking
    from enbedkit.model import build, toy_config

    noise_model = build(toy_config(d_model=32, d_kv=8, d_ff=64, n_encoder_layers=2,
                                   n_decoder_layers=1, heads=2, max_len=64,
                                   r_small=4, r_large=8, k_blocks=2),
                        seed=9, n_classes=2)
    noise_stem = tmp_path / "noise_clf"
    noise_model.save_checkpoint(noise_stem, step=0)

    parents = tmp_path / "parents.tsv"
    parents.write_bytes(b"ACGTACGT\tACGTACGT\nGGTTGGTT\n")
    mut_out = tmp_path / "mut"
    argv = [
        "mutate", "--out", mut_out, "--seed", 4,
        "--set", f"paths.checkpoint={s2s_out / 'checkpoint'}",
        "--set", f"paths.noise_checkpoint={noise_stem}",
        "--set", f"paths.parents={parents}",
        "--set", "mutation.n_beams=3",
    ]
    assert run(argv) == 0
    lines = (mut_out / "mutations.tsv").read_text().rstrip("\n").split("\n")
    header = lines[0].split("\t")
    assert header[0] == "parent"
    assert header.count("candidate1") == 1 and "candidate3" in header
    assert len(lines) == 3
    first = dict(zip(header, lines[1].split("\t")))
    assert first["ld_to_truth"] != ""
    second = dict(zip(header, lines[2].split("\t")))
    assert second["ld_to_truth"] == ""


# -- classify + attention export ---------------------------------------------------------------

def test_cmd_finetune_classify_and_attn_export(tmp_path):
    data = tmp_path / "labeled.tsv"
    rng = np.random.default_rng(1)
    base = np.frombuffer(b"ACGT", dtype=np.uint8)
    rows = []
    for i in range(24):
        seq = (b"A" if i % 2 == 0 else b"T") + rng.choice(base, size=7).tobytes()
        rows.append(seq + b"\t" + str(i % 2).encode())
    data.write_bytes(b"\n".join(rows) + b"\n")

    clf_out = tmp_path / "clf"
    argv = [
        "finetune-classify", "--out", clf_out, "--seed", 6, "--steps", 5, *TINY,
        "--set", f"paths.dataset={data}",
        "--set", "finetune.batch_size=2",
        "--set", "finetune.heldout_fraction=0.2",
    ]
    assert run(argv) == 0
    report = read_json(clf_out / "report.json")
    assert 0.0 <= report["accuracy"] <= 1.0
    assert read_json(clf_out / "checkpoint.json")["n_classes"] == 2

    attn_out = tmp_path / "maps"
    argv = [
        "attn-export", "--out", attn_out, "--seed", 7,
        "--set", f"paths.checkpoint={clf_out / 'checkpoint'}",
        "--sequence", "ACGTACGTACGTACGT",
    ]
    assert run(argv) == 0
    csvs = sorted(p for p in os.listdir(attn_out) if p.endswith(".csv") and p.startswith("attn"))
    pgms = sorted(p for p in os.listdir(attn_out) if p.endswith(".pgm"))
    assert len(csvs) == 2 * 2  # layers x heads
    assert len(pgms) == 2 * 2
    header = (attn_out / pgms[0]).read_bytes().split(b"\n", 3)
    assert header[0] == b"P5"
    w, h = map(int, header[1].split())
    assert h == 16  # one row per query position

    # byte-identical re-export
    attn_out2 = tmp_path / "maps2"
    argv[2] = str(attn_out2)
    assert run(argv) == 0
    for name in csvs + pgms:
        assert (attn_out / name).read_bytes() == (attn_out2 / name).read_bytes()


def test_cli_error_exit_code(tmp_path, capsys):
    assert run(["pretrain", "--out", tmp_path / "x"]) == 1
    assert "paths.corpus" in capsys.readouterr().err
