"""Command-line entry point wiring the pipelines together.

Every run is driven by one JSON config (defaults, overridable per key with
``--set``), echoes the fully-resolved config into the output directory,
and finishes by writing a run manifest. All randomness is derived from the
single run seed, so repeating a command with the same seed reproduces its
artifacts byte for byte.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys


def _cap_threads():
    """ENBEDKIT_THREADS caps the BLAS pool; must run before numpy loads."""
    cap = os.environ.get("ENBEDKIT_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


DEFAULT_CONFIG = {
    "seed": 0,
    "model": {"preset": "toy", "overrides": {}, "n_classes": None},
    "pretrain": {
        "steps": 200, "batch_size": 8, "crop_len": 128, "peak_lr": 1e-5,
        "weight_decay": 0.01, "eval_interval": 100, "eval_examples": 32,
        "heldout_fraction": 0.01, "mask_rate": 0.15, "mean_span": 20,
    },
    "finetune": {
        "steps": 200, "batch_size": 8, "peak_lr": 1e-4, "weight_decay": 0.01,
        "heldout_fraction": 0.1, "unfreeze_cadence": 0.1,
    },
    "noise": {
        "reference_length": 100_000, "telomere_fraction": 0.3,
        "telomere_bias": 0.6, "read_len": 512, "n_examples": 200,
        "p_insert": 0.02, "p_delete": 0.02, "p_substitute": 0.02,
    },
    "mutation": {"n_beams": 5},
    "paths": {
        "corpus": None, "dataset": None, "pairs": None, "parents": None,
        "checkpoint": None, "noise_checkpoint": None, "resume": None,
    },
}


class ConfigKeyError(ValueError):
    pass


def _merge_config(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigKeyError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and key != "overrides":
            if not isinstance(value, dict):
                raise ConfigKeyError(f"{where} must be a section object")
            out[key] = _merge_config(base[key], value, where)
        else:
            out[key] = value
    return out


def _apply_set(config, assignments):
    for item in assignments:
        if "=" not in item:
            raise ConfigKeyError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        node = config
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigKeyError(f"unknown config section: {key}")
            node = node[part]
        leaf = parts[-1]
        free_form = len(parts) >= 2 and parts[-2] == "overrides"
        if not isinstance(node, dict) or (leaf not in node and not free_form):
            raise ConfigKeyError(f"unknown config key: {key}")
        node[leaf] = value
    return config


def resolve_config(args) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        with open(args.config, "rb") as fh:
            config = _merge_config(config, json.loads(fh.read()))
    if getattr(args, "preset", None):
        config["model"]["preset"] = args.preset
    if getattr(args, "steps", None) is not None:
        config["pretrain"]["steps"] = args.steps
        config["finetune"]["steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        config["seed"] = args.seed
    _apply_set(config, getattr(args, "set", []) or [])
    return config


def config_hash(config) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _atomic_write(path, data):
    if isinstance(data, str):
        data = data.encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _prepare_out(args, config):
    out = args.out
    os.makedirs(out, exist_ok=True)
    _atomic_write(os.path.join(out, "config.json"),
                  json.dumps(config, sort_keys=True, indent=1) + "\n")
    return out


def _write_manifest(out, config, artifacts):
    from ._version import TOOL_VERSION

    manifest = {
        "config_hash": config_hash(config),
        "seed": config["seed"],
        "tool_version": TOOL_VERSION,
        "artifacts": sorted(artifacts),
    }
    _atomic_write(os.path.join(out, "manifest.json"),
                  json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def _build_model(config, n_classes=None):
    import numpy as np

    from .model import PRESETS, build

    section = config["model"]
    cfg = PRESETS[section["preset"]](**section.get("overrides", {}))
    classes = n_classes if n_classes is not None else section.get("n_classes")
    return build(cfg, seed=config["seed"], n_classes=classes, dtype=np.float32)


def _load_or_build(config, n_classes=None):
    from .model import Model

    stem = config["paths"]["checkpoint"]
    if stem:
        model, _ = Model.load_checkpoint(stem)
        if n_classes is not None:
            model.attach_head(n_classes)
        return model
    return _build_model(config, n_classes=n_classes)


def _metrics_csv(rows):
    lines = ["step,loss,lr,mlm_accuracy"]
    for step, loss, lr, acc in rows:
        accs = "" if acc is None else f"{acc:.10g}"
        lines.append(f"{step},{loss:.10g},{lr:.10g},{accs}")
    return "\n".join(lines) + "\n"


def _loss_csv(rows):
    lines = ["step,loss"]
    for step, loss in rows:
        lines.append(f"{step},{loss:.10g}")
    return "\n".join(lines) + "\n"


# -- commands ------------------------------------------------------------------

def cmd_corpus(args):
    from .genomics_io import build_corpus, read_fasta_file, write_corpus

    config = resolve_config(args)
    out = _prepare_out(args, config)
    records = []
    for path in args.fasta:
        if not os.path.exists(path):
            raise FileNotFoundError(f"FASTA file not found: {path}")
        records.extend(read_fasta_file(path))
    corpus = build_corpus(records)
    removed = sum(r.sequence.count(b"N") for r in records)
    corpus_path = os.path.join(out, "corpus.txt")
    write_corpus(corpus_path, corpus)
    stats = {
        "records": len(records),
        "segments": len(corpus.segments),
        "total_bases": corpus.total_bases,
        "n_bases_removed": removed,
    }
    _atomic_write(os.path.join(out, "stats.json"),
                  json.dumps(stats, sort_keys=True, indent=1) + "\n")
    print(f"corpus: {stats['segments']} segments, {stats['total_bases']} bases "
          f"({removed} 'N' bases removed)")
    _write_manifest(out, config, ["corpus.txt", "stats.json", "config.json"])
    return 0


def cmd_pretrain(args):
    from .genomics_io import read_corpus
    from .model import Model
    from .training import PretrainConfig, SpanCorruptionSpec, pretrain

    config = resolve_config(args)
    out = _prepare_out(args, config)
    if not config["paths"]["corpus"]:
        raise ConfigKeyError("paths.corpus is required for pretraining")
    corpus = read_corpus(config["paths"]["corpus"])
    section = config["pretrain"]
    start_step = 0
    if config["paths"]["resume"]:
        model, manifest = Model.load_checkpoint(config["paths"]["resume"])
        start_step = manifest["step"]
        print(f"resumed from step {start_step}")
    else:
        model = _build_model(config)
    pt = PretrainConfig(
        steps=section["steps"], batch_size=section["batch_size"],
        crop_len=section["crop_len"], peak_lr=section["peak_lr"],
        weight_decay=section["weight_decay"], seed=config["seed"],
        eval_interval=section["eval_interval"], eval_examples=section["eval_examples"],
        heldout_fraction=section["heldout_fraction"],
        span=SpanCorruptionSpec(mask_rate=section["mask_rate"],
                                mean_span=section["mean_span"]),
    )
    stem = os.path.join(out, "checkpoint")
    every = max(1, section["steps"] // 10)

    def on_step(step, loss, lr, acc):
        if (step + 1 - start_step) % every == 0 or acc is not None:
            extra = "" if acc is None else f" mlm_acc={acc:.4f}"
            print(f"step {step}: loss={loss:.4f} lr={lr:.3g}{extra}")

    _, log = pretrain(model, corpus, pt, checkpoint_stem=stem, on_step=on_step,
                      start_step=start_step)
    model.save_checkpoint(stem, step=start_step + pt.steps)
    _atomic_write(os.path.join(out, "metrics.csv"), _metrics_csv(log))
    _write_manifest(out, config,
                    ["checkpoint.json", "checkpoint.bin", "metrics.csv", "config.json"])
    return 0


def _read_labeled(path):
    from .genomics_io import load_labeled_tsv

    if not path:
        raise ConfigKeyError("paths.dataset is required (labeled TSV)")
    return load_labeled_tsv(path)


def cmd_finetune_classify(args):
    from .training import FinetuneConfig, finetune_classifier

    config = resolve_config(args)
    out = _prepare_out(args, config)
    data = _read_labeled(config["paths"]["dataset"])
    n_classes = config["model"]["n_classes"] or (max(ex.label for ex in data) + 1)
    model = _load_or_build(config, n_classes=n_classes)
    section = config["finetune"]
    ft = FinetuneConfig(steps=section["steps"], batch_size=section["batch_size"],
                        peak_lr=section["peak_lr"], weight_decay=section["weight_decay"],
                        seed=config["seed"], heldout_fraction=section["heldout_fraction"],
                        unfreeze_cadence=section["unfreeze_cadence"])
    every = max(1, ft.steps // 10)
    _, report = finetune_classifier(
        model, data, ft,
        on_step=lambda s, l: (s + 1) % every == 0 and print(f"step {s}: loss={l:.4f}"))
    log = report.pop("log")
    model.save_checkpoint(os.path.join(out, "checkpoint"), step=ft.steps)
    _atomic_write(os.path.join(out, "metrics.csv"), _loss_csv(log))
    _atomic_write(os.path.join(out, "report.json"),
                  json.dumps(report, sort_keys=True, indent=1, default=float) + "\n")
    print(f"heldout accuracy={report['accuracy']:.4f} f1_macro={report['f1_macro']:.4f}")
    _write_manifest(out, config,
                    ["checkpoint.json", "checkpoint.bin", "metrics.csv",
                     "report.json", "config.json"])
    return 0


def cmd_finetune_seq2seq(args):
    from .genomics_io import load_pairs_tsv
    from .training import FinetuneConfig, finetune_seq2seq

    config = resolve_config(args)
    out = _prepare_out(args, config)
    if not config["paths"]["pairs"]:
        raise ConfigKeyError("paths.pairs is required (source/target TSV)")
    pairs = load_pairs_tsv(config["paths"]["pairs"])
    model = _load_or_build(config)
    section = config["finetune"]
    ft = FinetuneConfig(steps=section["steps"], batch_size=section["batch_size"],
                        peak_lr=section["peak_lr"], weight_decay=section["weight_decay"],
                        seed=config["seed"], heldout_fraction=section["heldout_fraction"],
                        unfreeze_cadence=section["unfreeze_cadence"])
    every = max(1, ft.steps // 10)
    _, report = finetune_seq2seq(
        model, pairs, ft,
        on_step=lambda s, l: (s + 1) % every == 0 and print(f"step {s}: loss={l:.4f}"))
    log = report.pop("log")
    model.save_checkpoint(os.path.join(out, "checkpoint"), step=ft.steps)
    _atomic_write(os.path.join(out, "metrics.csv"), _loss_csv(log))
    _atomic_write(os.path.join(out, "report.json"),
                  json.dumps(report, sort_keys=True, indent=1, default=float) + "\n")
    print(f"heldout exact_match={report['exact_match']:.4f} "
          f"token_accuracy={report['token_accuracy']:.4f}")
    _write_manifest(out, config,
                    ["checkpoint.json", "checkpoint.bin", "metrics.csv",
                     "report.json", "config.json"])
    return 0


def cmd_noise(args):
    config = resolve_config(args)
    out = _prepare_out(args, config)
    section = config["noise"]
    if args.action == "make":
        from .genomics_io import save_labeled_tsv
        from .numerics import derive_seed
        from .tasks import NoiseSpec, build_noise_dataset, simulate_reference

        spec = NoiseSpec(p_insert=section["p_insert"], p_delete=section["p_delete"],
                         p_substitute=section["p_substitute"])
        ref = simulate_reference(section["reference_length"],
                                 section["telomere_fraction"],
                                 seed=derive_seed(config["seed"], "reference"))
        data = build_noise_dataset(ref, section["n_examples"], spec,
                                   seed=derive_seed(config["seed"], "noise_dataset"),
                                   read_len=section["read_len"],
                                   telomere_bias=section["telomere_bias"])
        save_labeled_tsv(os.path.join(out, "noise.tsv"), data)
        _atomic_write(os.path.join(out, "reference.txt"), ref.sequence + b"\n")
        print(f"wrote {len(data)} examples "
              f"({sum(1 for d in data if d.label == 0)} clean / "
              f"{sum(1 for d in data if d.label == 1)} noisy)")
        _write_manifest(out, config, ["noise.tsv", "reference.txt", "config.json"])
        return 0
    # detect
    from .model import Model
    from .tasks import classification_metrics, detect_noise

    if not config["paths"]["checkpoint"]:
        raise ConfigKeyError("paths.checkpoint is required for noise detect")
    model, _ = Model.load_checkpoint(config["paths"]["checkpoint"])
    data = _read_labeled(config["paths"]["dataset"])
    lines = ["sequence\tlabel\tp_noise"]
    preds = []
    for ex in data:
        p = detect_noise(model, ex.sequence)
        preds.append(int(p >= 0.5))
        lines.append(f"{ex.sequence.decode()}\t{ex.label}\t{p:.10g}")
    _atomic_write(os.path.join(out, "predictions.tsv"), "\n".join(lines) + "\n")
    report = classification_metrics(preds, [ex.label for ex in data])
    _atomic_write(os.path.join(out, "report.json"),
                  json.dumps(report, sort_keys=True, indent=1, default=float) + "\n")
    print(f"accuracy={report['accuracy']:.4f}")
    _write_manifest(out, config, ["predictions.tsv", "report.json", "config.json"])
    return 0


def cmd_mutate(args):
    from .model import Model
    from .tasks import generate_mutation, levenshtein

    config = resolve_config(args)
    out = _prepare_out(args, config)
    paths = config["paths"]
    if not paths["checkpoint"] or not paths["noise_checkpoint"]:
        raise ConfigKeyError("paths.checkpoint (seq2seq) and paths.noise_checkpoint "
                             "are required for mutate")
    if not paths["parents"]:
        raise ConfigKeyError("paths.parents is required (TSV: parent[\\ttruth])")
    seq2seq, _ = Model.load_checkpoint(paths["checkpoint"])
    noise, _ = Model.load_checkpoint(paths["noise_checkpoint"])
    n_beams = config["mutation"]["n_beams"]
    rows = []
    with open(paths["parents"], "rb") as fh:
        for line in fh:
            cols = line.strip().split(b"\t")
            if not cols or not cols[0]:
                continue
            rows.append((cols[0], cols[1] if len(cols) > 1 else None))
    header = (["parent"] + [f"candidate{i+1}" for i in range(n_beams)]
              + [f"beam_score{i+1}" for i in range(n_beams)]
              + [f"noise_prob{i+1}" for i in range(n_beams)]
              + ["chosen", "ld_to_parent", "ld_to_truth"])
    lines = ["\t".join(header)]

    def printable(seq: bytes) -> str:
        # keep the TSV well-formed even for junk from untrained models
        return "".join(chr(c) if 32 <= c < 127 else "?" for c in seq)

    for parent, truth in rows:
        result = generate_mutation(seq2seq, noise, parent, n_beams=n_beams, truth=truth)
        cands = list(result.candidates)
        cols = [parent.decode()]
        cols += [printable(c.sequence) for c in cands]
        cols += [f"{c.beam_score:.10g}" for c in cands]
        cols += [f"{c.noise_probability:.10g}" for c in cands]
        cols.append(str(result.chosen))
        cols.append(str(levenshtein(result.child, parent)))
        cols.append("" if result.levenshtein_to_truth is None
                    else str(result.levenshtein_to_truth))
        lines.append("\t".join(cols))
    _atomic_write(os.path.join(out, "mutations.tsv"), "\n".join(lines) + "\n")
    print(f"wrote {len(rows)} mutation rows ({n_beams} candidates each)")
    _write_manifest(out, config, ["mutations.tsv", "config.json"])
    return 0


def cmd_eval(args):
    from .tasks import generation_metrics

    config = resolve_config(args)
    out = _prepare_out(args, config)

    def read_rows(path):
        rows = []
        with open(path, "rb") as fh:
            for line in fh:
                line = line.rstrip(b"\n")
                if line:
                    rows.append(line.split(b"\t"))
        return rows

    preds = read_rows(args.predictions)
    truths = [row[0] for row in read_rows(args.truths)]
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} prediction rows vs {len(truths)} truth rows")
    report = generation_metrics(preds, truths)
    _atomic_write(os.path.join(out, "report.json"),
                  json.dumps(report, sort_keys=True, indent=1, default=float) + "\n")
    print(f"top1={report['top1']:.4f} top5={report['top5']:.4f} "
          f"mean_ld={report['mean_ld']:.4g} median_ld={report['median_ld']:.4g} "
          f"similarity={report['mean_similarity']:.4%}")
    _write_manifest(out, config, ["report.json", "config.json"])
    return 0


def cmd_attn_export(args):
    from .attention import map_to_csv_bytes, map_to_pgm_bytes
    from .model import Model
    from .tokenizer import encode

    config = resolve_config(args)
    out = _prepare_out(args, config)
    if not config["paths"]["checkpoint"]:
        raise ConfigKeyError("paths.checkpoint is required for attn-export")
    model, _ = Model.load_checkpoint(config["paths"]["checkpoint"])
    if args.sequence:
        seq = args.sequence.encode()
    elif config["paths"]["dataset"]:
        with open(config["paths"]["dataset"], "rb") as fh:
            seq = fh.readline().split(b"\t")[0].strip()
    else:
        raise ConfigKeyError("give --sequence or paths.dataset")
    maps = model.export_attention_maps(encode(seq))
    artifacts = ["config.json"]
    for layer in maps:
        for h in range(layer["weights"].shape[0]):
            stem = f"attn_layer{layer['layer']}_head{h}"
            _atomic_write(os.path.join(out, stem + ".csv"),
                          map_to_csv_bytes(layer["weights"][h], layer["legend"]))
            _atomic_write(os.path.join(out, stem + ".pgm"),
                          map_to_pgm_bytes(layer["weights"][h]))
            artifacts += [stem + ".csv", stem + ".pgm"]
    print(f"wrote {len(artifacts) - 1} map files "
          f"({len(maps)} layers x {maps[0]['weights'].shape[0]} heads x 2 formats)")
    _write_manifest(out, config, artifacts)
    return 0


# -- argument wiring ---------------------------------------------------------------

def _common(parser, needs_out=True):
    parser.add_argument("--config", help="JSON run config")
    parser.add_argument("--seed", type=int, help="run seed (overrides config)")
    parser.add_argument("--preset", choices=["toy", "base", "large"])
    parser.add_argument("--steps", type=int)
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (dotted path)")
    if needs_out:
        parser.add_argument("--out", required=True, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="enbedkit",
        description="Byte-level encoder-decoder toolkit for nucleotide sequences")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus", help="clean FASTA files into a training corpus")
    p.add_argument("fasta", nargs="+", help="input FASTA paths")
    _common(p)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("pretrain", help="span-corruption MLM pretraining")
    _common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune-classify", help="sequence classification fine-tune")
    _common(p)
    p.set_defaults(func=cmd_finetune_classify)

    p = sub.add_parser("finetune-seq2seq", help="sequence-to-sequence fine-tune")
    _common(p)
    p.set_defaults(func=cmd_finetune_seq2seq)

    p = sub.add_parser("noise", help="synthesize or score a noise dataset")
    p.add_argument("action", choices=["make", "detect"])
    _common(p)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("mutate", help="beam-search mutation generation")
    _common(p)
    p.set_defaults(func=cmd_mutate)

    p = sub.add_parser("eval", help="score candidate predictions against truths")
    p.add_argument("--predictions", required=True)
    p.add_argument("--truths", required=True)
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn-export", help="export attention maps as CSV + PGM")
    p.add_argument("--sequence", help="literal sequence to analyze")
    _common(p)
    p.set_defaults(func=cmd_attn_export)

    return parser


def main(argv=None):
    _cap_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
