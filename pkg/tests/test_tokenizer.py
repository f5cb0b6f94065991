import numpy as np
import pytest

from enbedkit import tokenizer
from enbedkit.tokenizer import (
    EOS_ID,
    N_SENTINELS,
    PAD_ID,
    SENTINEL_BASE,
    UNK_ID,
    VOCAB_SIZE,
    SentinelExhaustedError,
    decode,
    encode,
    sentinel,
)


def test_vocabulary_layout():
    assert VOCAB_SIZE == 384
    assert PAD_ID == 256 and UNK_ID == 257 and EOS_ID == 258
    assert SENTINEL_BASE == 259
    assert N_SENTINELS == 125
    assert SENTINEL_BASE + N_SENTINELS == VOCAB_SIZE


def test_encode_is_byte_identity():
    assert encode(b"ACGT").tolist() == [65, 67, 71, 84]


def test_encode_empty():
    assert encode(b"").tolist() == []


def test_encode_preserves_repetition():
    assert encode(b"AA").tolist() == [65, 65]


def test_decode_inverse_of_encode():
    assert decode([65, 67, 71, 84]) == b"ACGT"


def test_decode_strips_pad():
    assert decode([65, PAD_ID, PAD_ID]) == b"A"


def test_decode_renders_sentinels():
    assert decode([259, 65]) == b"<M0>A"


def test_decode_renders_unk():
    assert decode([UNK_ID]) == b"?"


def test_sentinel_ids():
    assert sentinel(0) == 259
    assert sentinel(124) == 383


def test_sentinel_exhaustion():
    with pytest.raises(SentinelExhaustedError):
        sentinel(125)


def test_round_trip_random_byte_strings():
    rng = np.random.default_rng(11)
    for _ in range(500):
        raw = rng.integers(0, 256, size=rng.integers(0, 64)).astype(np.uint8).tobytes()
        assert decode(encode(raw)) == raw


def test_encode_length_preserving_and_position_local():
    rng = np.random.default_rng(12)
    for _ in range(100):
        raw = bytearray(rng.integers(0, 256, size=32).astype(np.uint8).tobytes())
        ids = encode(bytes(raw))
        assert len(ids) == len(raw)
        i = int(rng.integers(0, 32))
        flipped = bytearray(raw)
        flipped[i] = (flipped[i] + 1) % 256
        ids2 = encode(bytes(flipped))
        diff = np.nonzero(ids != ids2)[0]
        assert diff.tolist() == [i]


def test_is_sentinel():
    assert tokenizer.is_sentinel(259) and tokenizer.is_sentinel(383)
    assert not tokenizer.is_sentinel(EOS_ID) and not tokenizer.is_sentinel(65)
