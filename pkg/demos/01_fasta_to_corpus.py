#!/usr/bin/env python3
"""Walk through FASTA ingestion: parsing, hard-mask cleaning, corpus stats."""

from enbedkit.genomics_io import build_corpus, clean_sequence, parse_fasta

RAW = b"""\
>chrA demo contig with soft and hard masking
ACGTacgtNNNNACGT
acgtACGT
>chrB second record
NNNNNNNN
>chrC third record
TTAGGGTTAGGGTTAGGG
"""

records = parse_fasta(RAW)
print(f"parsed {len(records)} records")
for rec in records:
    print(f"  {rec.id:5s} {len(rec.sequence):3d} bases  desc={rec.description!r}")

print("\nhard-mask cleaning drops 'N' runs, keeps everything else:")
for rec in records:
    cleaned = clean_sequence(rec.sequence)
    print(f"  {rec.id}: {rec.sequence.decode()} -> {cleaned.decode() or '(empty)'}")

corpus = build_corpus(records)
print(f"\ncorpus: {len(corpus.segments)} usable segments, {corpus.total_bases} bases")
print("(chrB vanished: nothing left after cleaning)")
