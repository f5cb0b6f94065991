#!/usr/bin/env python3
"""Pretrain a small model on a periodic corpus, watch masked-token accuracy
climb past chance, then export its attention maps.

Takes a couple of minutes on a laptop; shrink `STEPS` for a faster look.
"""

import os
import tempfile

import numpy as np

from enbedkit.attention import map_to_csv_bytes, map_to_pgm_bytes
from enbedkit.model import build, toy_config
from enbedkit.tokenizer import encode
from enbedkit.training import (
    PretrainConfig,
    SpanCorruptionSpec,
    mlm_accuracy,
    pretrain,
    split_corpus,
)

STEPS = 300

rng = np.random.default_rng(1)
motif = np.frombuffer(b"ACGT" * 16, dtype=np.uint8).copy()
rng.shuffle(motif)
corpus_segments = [motif.tobytes() * 600]  # period-64 synthetic genome
print(f"corpus: {len(corpus_segments[0]):,} bases with a 64-base repeating motif")

cfg = toy_config(n_encoder_layers=2, n_decoder_layers=1, d_model=48, d_kv=12,
                 d_ff=96, heads=4, r_small=8, r_large=16, k_blocks=4)
model = build(cfg, seed=3, dtype=np.float32)

spec = SpanCorruptionSpec()
_, held = split_corpus(corpus_segments, 0.01, seed=0, min_bases=128)
chance = mlm_accuracy(model, held, spec, seed=9, crop_len=128, n_examples=24)
print(f"untrained masked-token accuracy: {chance:.3f} (chance is 0.25)")


class Corpus:
    segments = corpus_segments


pt = PretrainConfig(steps=STEPS, batch_size=8, crop_len=128, peak_lr=3e-3,
                    seed=4, eval_interval=STEPS // 3, eval_examples=24)
_, log = pretrain(model, Corpus, pt,
                  on_step=lambda s, l, r, a: a is not None
                  and print(f"  step {s + 1}: loss={l:.3f} masked-acc={a:.3f}"))

out = tempfile.mkdtemp(prefix="attn_maps_")
maps = model.export_attention_maps(encode(motif.tobytes() * 2))
for layer in maps:
    for h in range(layer["weights"].shape[0]):
        stem = os.path.join(out, f"layer{layer['layer']}_head{h}")
        with open(stem + ".csv", "wb") as fh:
            fh.write(map_to_csv_bytes(layer["weights"][h], layer["legend"]))
        with open(stem + ".pgm", "wb") as fh:
            fh.write(map_to_pgm_bytes(layer["weights"][h]))
w = maps[-1]["weights"]
print(f"\nexported {len(maps)} layers x {w.shape[0]} heads of attention maps to {out}")
print(f"each map is {w.shape[1]}x{w.shape[2]} (queries x window+global slots), "
      f"columns {maps[-1]['legend'][:3]} ... {maps[-1]['legend'][-3:]}")
