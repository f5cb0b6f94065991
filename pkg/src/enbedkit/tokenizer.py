"""Byte-level tokenizer over a fixed 384-entry vocabulary.

Layout: ids 0-255 are the identity map on byte values, then PAD=256,
UNK=257, EOS=258, and 125 span-mask sentinels at 259-383. Encoding never
produces UNK (every byte has an id); it exists for hand-built inputs.
"""

from __future__ import annotations

import numpy as np

VOCAB_SIZE = 384
PAD_ID = 256
UNK_ID = 257
EOS_ID = 258
SENTINEL_BASE = 259
N_SENTINELS = 125  # ids 259..383


class SentinelExhaustedError(ValueError):
    """More mask spans requested than there are sentinel ids."""


def encode(s) -> np.ndarray:
    """Map a byte string to token ids, one id per byte."""
    if isinstance(s, str):
        s = s.encode("utf-8")
    return np.frombuffer(bytes(s), dtype=np.uint8).astype(np.int64)


def decode(ids) -> bytes:
    """Render token ids back to bytes.

    PAD and EOS are stripped, sentinels render as ``<M{i}>`` markers and
    UNK as ``?`` so corrupted inputs and span targets stay printable.
    """
    out = bytearray()
    for t in np.asarray(ids, dtype=np.int64).ravel():
        t = int(t)
        if t < 0 or t >= VOCAB_SIZE:
            raise ValueError(f"token id {t} outside vocabulary [0, {VOCAB_SIZE})")
        if t < 256:
            out.append(t)
        elif t in (PAD_ID, EOS_ID):
            continue
        elif t == UNK_ID:
            out.append(ord("?"))
        else:
            out.extend(f"<M{t - SENTINEL_BASE}>".encode("ascii"))
    return bytes(out)


def sentinel(i: int) -> int:
    """Id of the i-th span sentinel; spans are indexed left to right."""
    if not 0 <= i < N_SENTINELS:
        raise SentinelExhaustedError(
            f"sentinel index {i} out of range [0, {N_SENTINELS}); reduce span count"
        )
    return SENTINEL_BASE + i


def is_sentinel(t: int) -> bool:
    return SENTINEL_BASE <= t < VOCAB_SIZE
