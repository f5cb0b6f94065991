"""FASTA ingestion, hard-mask cleaning, and TSV dataset loaders."""

from __future__ import annotations

import os
from dataclasses import dataclass

VALID_BASES = frozenset(b"ACGT")
VALID_RAW = frozenset(b"ACGTN")


class FastaError(ValueError):
    """Malformed FASTA input."""


class SequenceAlphabetError(ValueError):
    """Sequence contains a character outside {A,C,G,T,N}."""

    def __init__(self, char, position):
        self.char = char
        self.position = position
        super().__init__(f"invalid base {char!r} at position {position}")


class EmptyCorpusError(ValueError):
    """No usable sequence remained after cleaning."""


@dataclass(frozen=True)
class FastaRecord:
    id: str
    description: str
    sequence: bytes


@dataclass(frozen=True)
class CleanCorpus:
    segments: list
    total_bases: int


@dataclass(frozen=True)
class LabeledExample:
    sequence: bytes
    label: int


@dataclass(frozen=True)
class SeqPair:
    source: bytes
    target: bytes


def parse_fasta(raw) -> list:
    """Parse multi-record FASTA text into records.

    Sequence lines are concatenated and uppercased; the header's first
    whitespace-delimited token becomes the id, the remainder the description.
    Soft-masked (lowercase) bases are uppercased, not excluded.
    """
    if isinstance(raw, str):
        raw = raw.encode("utf-8")
    records = []
    header = None  # (id, description, line_number)
    chunks = []

    def flush():
        if header is None:
            return
        seq = b"".join(chunks).upper()
        records.append(FastaRecord(id=header[0], description=header[1], sequence=seq))

    for lineno, line in enumerate(raw.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith(b">"):
            flush()
            fields = line[1:].split(None, 1)
            if not fields or not fields[0]:
                raise FastaError(f"line {lineno}: empty FASTA header")
            name = fields[0].decode("utf-8")
            desc = fields[1].decode("utf-8") if len(fields) > 1 else ""
            header = (name, desc, lineno)
            chunks = []
        else:
            if header is None:
                raise FastaError(f"line {lineno}: sequence data before first '>' header")
            if b">" in line:
                raise FastaError(f"line {lineno}: '>' inside sequence data")
            chunks.append(line)
    flush()
    return records


def serialize_fasta(records, width=60) -> bytes:
    """Inverse of parse_fasta for well-formed records (used for round trips)."""
    out = []
    for rec in records:
        head = f">{rec.id} {rec.description}".rstrip() + "\n"
        out.append(head.encode("utf-8"))
        seq = rec.sequence
        for i in range(0, len(seq), width):
            out.append(seq[i : i + width] + b"\n")
        if not seq:
            out.append(b"\n")
    return b"".join(out)


def clean_sequence(seq: bytes) -> bytes:
    """Drop hard-masked 'N' bases, preserving the order of the rest.

    Any character outside {A,C,G,T,N} is rejected rather than dropped, so
    corrupt inputs surface instead of polluting training data.
    """
    if isinstance(seq, str):
        seq = seq.encode("utf-8")
    for pos, ch in enumerate(seq):
        if ch not in VALID_RAW:
            raise SequenceAlphabetError(chr(ch), pos)
    return seq.replace(b"N", b"")


def build_corpus(records) -> CleanCorpus:
    """Clean every record and keep non-empty segments as separate entries.

    Records stay separate so downstream span sampling never crosses a
    record boundary.
    """
    segments = []
    for rec in records:
        cleaned = clean_sequence(rec.sequence)
        if cleaned:
            segments.append(cleaned)
    if not segments:
        raise EmptyCorpusError("no usable bases after cleaning")
    total = sum(len(s) for s in segments)
    return CleanCorpus(segments=segments, total_bases=total)


class TsvRowError(ValueError):
    """A TSV row failed to parse; carries the 1-based line number."""

    def __init__(self, lineno, message):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


def _iter_tsv_rows(path, n_cols):
    with open(path, "rb") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip(b"\n").rstrip(b"\r")
            if not line:
                continue
            cols = line.split(b"\t")
            if len(cols) != n_cols:
                raise TsvRowError(lineno, f"expected {n_cols} columns, got {len(cols)}")
            yield lineno, cols


def load_labeled_tsv(path) -> list:
    """Load (sequence, integer label) rows."""
    out = []
    for lineno, (seq, label) in _iter_tsv_rows(path, 2):
        try:
            value = int(label)
        except ValueError:
            raise TsvRowError(lineno, f"label {label.decode(errors='replace')!r} is not an integer") from None
        out.append(LabeledExample(sequence=seq, label=value))
    return out


def load_pairs_tsv(path) -> list:
    """Load (source, target) rows."""
    out = []
    for lineno, (src, tgt) in _iter_tsv_rows(path, 2):
        if not src or not tgt:
            raise TsvRowError(lineno, "empty sequence")
        out.append(SeqPair(source=src, target=tgt))
    return out


def save_labeled_tsv(path, examples):
    with open(path, "wb") as fh:
        for ex in examples:
            fh.write(ex.sequence + b"\t" + str(ex.label).encode() + b"\n")


def save_pairs_tsv(path, pairs):
    with open(path, "wb") as fh:
        for pair in pairs:
            fh.write(pair.source + b"\t" + pair.target + b"\n")


def read_fasta_file(path) -> list:
    if not os.path.exists(path):
        raise FileNotFoundError(f"FASTA file not found: {path}")
    with open(path, "rb") as fh:
        return parse_fasta(fh.read())


def write_corpus(path, corpus: CleanCorpus):
    """One cleaned segment per line."""
    with open(path, "wb") as fh:
        for seg in corpus.segments:
            fh.write(seg + b"\n")


def read_corpus(path) -> CleanCorpus:
    segments = []
    with open(path, "rb") as fh:
        for line in fh:
            seg = line.strip()
            if seg:
                segments.append(seg)
    if not segments:
        raise EmptyCorpusError(f"corpus file {path} has no segments")
    return CleanCorpus(segments=segments, total_bases=sum(len(s) for s in segments))
