#!/usr/bin/env python3
"""The byte-level vocabulary: 256 byte ids + PAD/UNK/EOS + 125 span sentinels."""

import numpy as np

from enbedkit.tokenizer import EOS_ID, PAD_ID, VOCAB_SIZE, decode, encode, sentinel

print(f"vocabulary size: {VOCAB_SIZE}")
print(f"byte ids 0-255, PAD={PAD_ID}, EOS={EOS_ID}, sentinels {sentinel(0)}-{sentinel(124)}")

seq = b"ACGT"
ids = encode(seq)
print(f"\nencode({seq}) = {ids.tolist()}   (plain ASCII byte values)")
print(f"decode back: {decode(ids)}")

print("\nbyte-level means position-local: flip one base, one token changes")
a, b = encode(b"ACGTACGT"), encode(b"ACTTACGT")
print(f"  {a.tolist()}\n  {b.tolist()}\n  differ at {np.nonzero(a != b)[0].tolist()}")

print("\nsentinels render visibly; PAD/EOS vanish on decode:")
ids = np.array([sentinel(0), 65, 67, sentinel(1), 71, EOS_ID, PAD_ID, PAD_ID])
print(f"  {ids.tolist()} -> {decode(ids)}")
