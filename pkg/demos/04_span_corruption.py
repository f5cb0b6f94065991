#!/usr/bin/env python3
"""Span corruption in pictures: sentinel-masked input, indexed target,
and the splice-back inverse."""

import numpy as np

from enbedkit.tokenizer import decode, encode
from enbedkit.training import SpanCorruptionSpec, corrupt_spans, splice_back

rng = np.random.default_rng(11)
seq = b"TTAGGGTTAGGGTTAGGGTTAGGGACGTACGTACGTTTAGGGTTAGGG"
spec = SpanCorruptionSpec(mask_rate=0.25, mean_span=4)

tokens = encode(seq)
inp, target = corrupt_spans(tokens, spec, rng)

print(f"original : {seq.decode()}")
print(f"input    : {decode(inp).decode()}")
print(f"target   : {decode(target).decode()}")
print(f"restored : {decode(splice_back(inp, target)).decode()}")
assert np.array_equal(splice_back(inp, target), tokens)

# the statistics the corruption is built to hit
spec = SpanCorruptionSpec()  # 15% at mean span 20
masked = total = 0
span_lengths = []
for i in range(300):
    tokens = rng.integers(65, 69, size=512)
    inp, target = corrupt_spans(tokens, spec, np.random.default_rng(i))
    n_spans = int((np.asarray(inp) >= 259).sum())
    masked += len(target) - n_spans - 1
    total += len(tokens)
    run = 0
    for t in target:
        if t >= 256:
            if run:
                span_lengths.append(run)
            run = 0
        else:
            run += 1
print(f"\nover {total:,} tokens: masked fraction {masked / total:.4f} (target 0.15)")
print(f"mean span length {np.mean(span_lengths):.2f} over {len(span_lengths)} spans "
      f"(target 20, clamped to [1, 40])")
