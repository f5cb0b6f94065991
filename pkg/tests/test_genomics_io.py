import numpy as np
import pytest

from enbedkit.genomics_io import (
    CleanCorpus,
    EmptyCorpusError,
    FastaError,
    SequenceAlphabetError,
    TsvRowError,
    build_corpus,
    clean_sequence,
    load_labeled_tsv,
    load_pairs_tsv,
    parse_fasta,
    read_corpus,
    save_labeled_tsv,
    save_pairs_tsv,
    serialize_fasta,
    write_corpus,
)


def test_parse_single_record_uppercases_and_concatenates():
    records = parse_fasta(b">chr1 test\nACGT\nacgt\n")
    assert len(records) == 1
    rec = records[0]
    assert rec.id == "chr1"
    assert rec.description == "test"
    assert rec.sequence == b"ACGTACGT"


def test_parse_empty_input():
    assert parse_fasta(b"") == []


def test_parse_multi_record():
    records = parse_fasta(b">a\nAC\n>b\nGT\n")
    assert [r.sequence for r in records] == [b"AC", b"GT"]
    assert [r.id for r in records] == ["a", "b"]


def test_parse_rejects_sequence_before_header():
    with pytest.raises(FastaError, match="line 1"):
        parse_fasta(b"ACGT\n>a\nAC\n")


def test_parse_serialize_parse_fixed_point():
    text = b">chr1 human chr 1\nACGTACGTACGT\n>chr2\nGGGG\n"
    records = parse_fasta(text)
    again = parse_fasta(serialize_fasta(records))
    assert again == records


def test_clean_removes_hard_masked_bases():
    assert clean_sequence(b"ACNNGT") == b"ACGT"


def test_clean_all_masked():
    assert clean_sequence(b"NNNN") == b""


def test_clean_identity_on_clean_input():
    assert clean_sequence(b"ACGT") == b"ACGT"


def test_clean_is_idempotent():
    rng = np.random.default_rng(7)
    alphabet = np.frombuffer(b"ACGTN", dtype=np.uint8)
    for _ in range(50):
        seq = alphabet[rng.integers(0, 5, size=rng.integers(0, 200))].tobytes()
        once = clean_sequence(seq)
        assert clean_sequence(once) == once


def test_clean_rejects_bad_character_with_position():
    with pytest.raises(SequenceAlphabetError) as err:
        clean_sequence(b"ACGXZT")
    assert err.value.position == 3
    assert err.value.char == "X"


def test_build_corpus_drops_empty_segments_and_counts():
    records = parse_fasta(b">a\nACNN\n>b\nGT\n")
    corpus = build_corpus(records)
    assert corpus.segments == [b"AC", b"GT"]
    assert corpus.total_bases == 4


def test_build_corpus_all_masked_is_error():
    records = parse_fasta(b">a\nNN\n")
    with pytest.raises(EmptyCorpusError):
        build_corpus(records)


def test_build_corpus_total_is_additive():
    body = b"ACGT" * 25
    records = parse_fasta(b">a\n" + body + b"\n>b\n" + body + b"\n>c\n" + body + b"\n")
    assert build_corpus(records).total_bases == 300


def test_total_bases_equals_length_minus_n_count():
    rng = np.random.default_rng(3)
    alphabet = np.frombuffer(b"ACGTN", dtype=np.uint8)
    seqs = [alphabet[rng.integers(0, 5, size=80)].tobytes() for _ in range(10)]
    text = b"".join(b">%d\n%s\n" % (i, s) for i, s in enumerate(seqs))
    corpus = build_corpus(parse_fasta(text))
    expected = sum(len(s) - s.count(b"N") for s in seqs)
    assert corpus.total_bases == expected


def test_load_labeled_tsv(tmp_path):
    path = tmp_path / "labeled.tsv"
    path.write_bytes(b"ACGT\t1\n")
    rows = load_labeled_tsv(path)
    assert len(rows) == 1
    assert rows[0].sequence == b"ACGT"
    assert rows[0].label == 1


def test_load_pairs_tsv(tmp_path):
    path = tmp_path / "pairs.tsv"
    path.write_bytes(b"ACGT\tAGT\n")
    rows = load_pairs_tsv(path)
    assert rows[0].source == b"ACGT"
    assert rows[0].target == b"AGT"


def test_labeled_tsv_bad_label_reports_line(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_bytes(b"ACGT\tx\n")
    with pytest.raises(TsvRowError) as err:
        load_labeled_tsv(path)
    assert err.value.lineno == 1


def test_labeled_tsv_wrong_column_count(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_bytes(b"ACGT\t1\textra\n")
    with pytest.raises(TsvRowError):
        load_labeled_tsv(path)


def test_tsv_round_trips(tmp_path):
    from enbedkit.genomics_io import LabeledExample, SeqPair

    labeled = [LabeledExample(b"ACGT", 0), LabeledExample(b"GGTT", 1)]
    pairs = [SeqPair(b"ACGT", b"AGT")]
    lp, pp = tmp_path / "l.tsv", tmp_path / "p.tsv"
    save_labeled_tsv(lp, labeled)
    save_pairs_tsv(pp, pairs)
    assert load_labeled_tsv(lp) == labeled
    assert load_pairs_tsv(pp) == pairs


def test_corpus_file_round_trip(tmp_path):
    corpus = CleanCorpus(segments=[b"ACGT", b"GGCC"], total_bases=8)
    path = tmp_path / "corpus.txt"
    write_corpus(path, corpus)
    assert read_corpus(path) == corpus
