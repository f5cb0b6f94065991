#!/usr/bin/env python3
"""Synthetic sequencing noise: a motif-rich reference, biased read sampling,
and per-base insertion/deletion/substitution errors at 2% each."""

import numpy as np

from enbedkit.tasks import (
    NoiseSpec,
    build_noise_dataset,
    inject_noise,
    sample_read,
    simulate_reference,
)

ref = simulate_reference(200_000, telomere_fraction=0.02, seed=5)
print(f"reference: {len(ref):,} bases, {len(ref.repeat_regions)} repeat regions "
      f"covering {ref.repeat_bases / len(ref):.1%}")
a, b = ref.repeat_regions[0]
print(f"first region [{a}:{b}]: {ref.sequence[a:a + 30].decode()}...")

rng = np.random.default_rng(0)
hits = sum(
    ref.in_repeat(sample_read(ref, rng, telomere_bias=0.6, return_start=True)[1])
    for _ in range(2000)
)
print(f"\nwith bias 0.6, {hits / 2000:.1%} of 2000 reads start inside a repeat region")

spec = NoiseSpec()  # 2% / 2% / 2%
read = sample_read(ref, rng, read_len=60, telomere_bias=1.0)
noisy = inject_noise(read, spec, rng)
print(f"\nclean : {read.decode()}")
print(f"noisy : {noisy.decode()}")

seq = sample_read(ref, rng, read_len=100_000, telomere_bias=0.0)
noisy, events = inject_noise(seq, spec, rng, return_events=True)
names = ["delete", "substitute", "insert", "copy"]
for e, name in enumerate(names):
    print(f"{name:10s} {(events == e).mean():.4f}")
print(f"output/input length ratio: {len(noisy) / len(seq):.4f}")

data = build_noise_dataset(ref, 10, spec, seed=1)
print(f"\ndataset: {len(data)} examples, labels "
      f"{[ex.label for ex in data]}, all length {len(data[0].sequence)}")
