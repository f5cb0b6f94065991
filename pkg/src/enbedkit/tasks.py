"""Downstream pipelines: read-noise simulation and detection, beam-search
mutation generation, Levenshtein distance, and evaluation metrics."""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from . import tokenizer as tok
from .genomics_io import LabeledExample
from .numerics import derive_seed

BASES = b"ACGT"
_BASE_ARR = np.frombuffer(BASES, dtype=np.uint8)
TELOMERE_MOTIF = b"TTAGGG"


@dataclass(frozen=True)
class NoiseSpec:
    """Per-base event probabilities for simulated sequencing errors."""

    p_insert: float = 0.02
    p_delete: float = 0.02
    p_substitute: float = 0.02

    def __post_init__(self):
        for name, p in (("p_insert", self.p_insert), ("p_delete", self.p_delete),
                        ("p_substitute", self.p_substitute)):
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name}={p} outside [0, 1)")
        if self.p_insert + self.p_delete + self.p_substitute >= 1.0:
            raise ValueError("event probabilities must sum below 1")

    @property
    def clean_rate(self):
        return 1.0 - (self.p_insert + self.p_delete + self.p_substitute)


@dataclass(frozen=True)
class ReferenceSim:
    """Synthetic reference: i.i.d. ACGT with motif-tiled repeat regions."""

    sequence: bytes
    repeat_regions: tuple  # ((start, end), ...) sorted, non-overlapping
    motif: bytes = TELOMERE_MOTIF

    def __len__(self):
        return len(self.sequence)

    def in_repeat(self, pos) -> bool:
        starts = [a for a, _ in self.repeat_regions]
        i = bisect_right(starts, pos) - 1
        return i >= 0 and pos < self.repeat_regions[i][1]

    @property
    def repeat_bases(self):
        return sum(b - a for a, b in self.repeat_regions)


def simulate_reference(length, telomere_fraction, seed, mean_region=500,
                       motif=TELOMERE_MOTIF) -> ReferenceSim:
    """Generate a reference with ``telomere_fraction`` of bases motif-tiled.

    Repeat regions are exact tilings of the motif (truncated at the
    region end); everything else is uniform ACGT. Deterministic per seed.
    """
    if length < 1024:
        raise ValueError("reference length must be at least 1024")
    if not 0.0 <= telomere_fraction <= 1.0:
        raise ValueError(f"telomere_fraction {telomere_fraction} outside [0, 1]")
    rng = np.random.default_rng(seed)
    seq = _BASE_ARR[rng.integers(0, 4, size=length)]

    target = int(round(telomere_fraction * length))
    regions = []
    if target > 0:
        lengths = []
        remaining = target
        while remaining > 0:
            n = int(rng.integers(mean_region // 2, mean_region * 3 // 2 + 1))
            lengths.append(min(n, remaining))
            remaining -= lengths[-1]
        free = length - target
        gaps = rng.random(len(lengths) + 1)
        gaps = np.floor(gaps / gaps.sum() * free).astype(np.int64)
        gaps[-1] = free - gaps[:-1].sum()
        pos = 0
        for gap, n in zip(gaps, lengths):
            start = pos + int(gap)
            if regions and regions[-1][1] == start:  # zero gap: extend, keep phase
                regions[-1] = (regions[-1][0], start + n)
            else:
                regions.append((start, start + n))
            pos = start + n
        regions = [tuple(r) for r in regions]
        for start, end in regions:
            n = end - start
            tile = np.frombuffer((motif * (n // len(motif) + 1))[:n], dtype=np.uint8)
            seq[start:end] = tile
    return ReferenceSim(sequence=seq.tobytes(), repeat_regions=tuple(regions), motif=motif)


def sample_read(ref: ReferenceSim, rng, read_len=512, telomere_bias=0.6,
                return_start=False):
    """Fixed-length read whose start falls in a repeat region with
    probability ``telomere_bias`` (else uniform over the whole reference)."""
    L = len(ref)
    if read_len > L:
        raise ValueError(f"read_len {read_len} exceeds reference length {L}")
    max_start = L - read_len
    windows = [(a, min(b, max_start + 1)) for a, b in ref.repeat_regions
               if a <= max_start]
    if telomere_bias > 0 and not windows:
        raise ValueError("telomere_bias > 0 but the reference has no usable "
                         "repeat region")
    if rng.random() < telomere_bias:
        sizes = np.array([b - a for a, b in windows], dtype=np.float64)
        w = int(rng.choice(len(windows), p=sizes / sizes.sum()))
        start = int(rng.integers(windows[w][0], windows[w][1]))
    else:
        start = int(rng.integers(0, max_start + 1))
    read = ref.sequence[start : start + read_len]
    return (read, start) if return_start else read


# substitution lookup: for base index i, the three other base indices
_OTHERS = np.array([[j for j in range(4) if j != i] for i in range(4)], dtype=np.int64)
_BASE_INDEX = np.full(256, -1, dtype=np.int64)
for _i, _b in enumerate(BASES):
    _BASE_INDEX[_b] = _i


EVENT_DELETE, EVENT_SUBSTITUTE, EVENT_INSERT, EVENT_COPY = 0, 1, 2, 3


def inject_noise(seq, spec: NoiseSpec, rng, return_events=False):
    """Corrupt a read with mutually exclusive per-base events.

    One uniform draw per input base decides delete / substitute (with a
    different base) / insert (emit the base, then one uniform base) /
    clean copy, so the per-base clean rate is exactly
    1 - (p_del + p_sub + p_ins). With ``return_events`` the per-base
    event codes come back alongside the noisy read.
    """
    arr = np.frombuffer(bytes(seq), dtype=np.uint8)
    n = len(arr)
    if n == 0:
        return (b"", np.zeros(0, dtype=np.int64)) if return_events else b""
    idx = _BASE_INDEX[arr]
    if (idx < 0).any():
        bad = int(np.nonzero(idx < 0)[0][0])
        raise ValueError(f"non-ACGT base {chr(arr[bad])!r} at position {bad}")
    draws = rng.random(n)
    edges = np.cumsum([spec.p_delete, spec.p_substitute, spec.p_insert])
    event = np.digitize(draws, edges)  # 0 del, 1 sub, 2 ins, 3 copy
    out_len = np.choose(event, [0, 1, 2, 1])
    offs = np.concatenate([[0], np.cumsum(out_len)[:-1]])
    out = np.empty(int(out_len.sum()), dtype=np.uint8)
    sub = event == 1
    if sub.any():
        pick = rng.integers(0, 3, size=int(sub.sum()))
        out[offs[sub]] = _BASE_ARR[_OTHERS[idx[sub], pick]]
    ins = event == 2
    if ins.any():
        out[offs[ins]] = arr[ins]
        out[offs[ins] + 1] = _BASE_ARR[rng.integers(0, 4, size=int(ins.sum()))]
    copy = event == 3
    if copy.any():
        out[offs[copy]] = arr[copy]
    noisy = out.tobytes()
    return (noisy, event) if return_events else noisy


def build_noise_dataset(ref: ReferenceSim, n_examples, spec: NoiseSpec, seed,
                        read_len=512, telomere_bias=0.6) -> list:
    """Balanced clean (label 0) / noisy (label 1) reads of fixed length.

    Noisy reads are injected over a window wider than the read and then
    cropped, so deletions never shorten an example; the window grows in
    the (rare) case the corrupted window still comes up short.
    """
    if n_examples % 2 != 0:
        raise ValueError("n_examples must be even for a balanced dataset")
    margin = read_len + 48
    examples = []
    for i in range(n_examples):
        rng = np.random.default_rng(derive_seed(seed, "noise_ds", i))
        noisy = i % 2 == 1
        if not noisy:
            read = sample_read(ref, rng, read_len=read_len, telomere_bias=telomere_bias)
            examples.append(LabeledExample(sequence=read, label=0))
            continue
        window, start = sample_read(ref, rng, read_len=min(margin, len(ref)),
                                    telomere_bias=telomere_bias, return_start=True)
        w = read_len + 12
        corrupted = inject_noise(window[:w], spec, rng)
        while len(corrupted) < read_len and w < len(window):
            w = min(w + 32, len(window))
            corrupted = inject_noise(window[:w], spec, rng)
        if len(corrupted) < read_len:
            corrupted = corrupted + window[-(read_len - len(corrupted)):]
        examples.append(LabeledExample(sequence=corrupted[:read_len], label=1))
    return examples


def detect_noise(model, seq) -> float:
    """Probability the fine-tuned 2-class model assigns to 'noisy'."""
    if model.n_classes != 2:
        raise ValueError("noise detection needs a model with a 2-class head")
    probs = model.classify(tok.encode(seq))
    return float(probs[1])


# -- mutation generation -------------------------------------------------------

@dataclass(frozen=True)
class MutationCandidate:
    ids: np.ndarray
    beam_score: float
    noise_probability: float

    @property
    def sequence(self) -> bytes:
        return tok.decode(self.ids)


@dataclass(frozen=True)
class MutationResult:
    parent: bytes
    candidates: tuple  # MutationCandidate, beam order
    chosen: int
    levenshtein_to_truth: int | None = None

    @property
    def child(self) -> bytes:
        return self.candidates[self.chosen].sequence


def generate_mutation(seq2seq_model, noise_model, parent, n_beams=5, truth=None,
                      eos_id=tok.EOS_ID) -> MutationResult:
    """Beam-generate n_beams children of ``parent`` and pick the cleanest.

    Candidates run to exactly len(parent) tokens; ones that stopped early
    at EOS are excluded from the ranking (unless every candidate is
    short, in which case the longest wins). Among eligible candidates the
    one with the lowest noise probability is chosen; ties go to the
    higher beam score.
    """
    if not parent:
        raise ValueError("parent sequence must be non-empty")
    source = tok.encode(parent)
    beams = seq2seq_model.generate_beam(source, n_beams=n_beams, max_new=len(parent),
                                        eos_id=eos_id)
    candidates = []
    for ids, score in beams:
        noise_p = _noise_probability(noise_model, ids)
        candidates.append(MutationCandidate(ids=ids, beam_score=score,
                                            noise_probability=noise_p))
    full = [i for i, c in enumerate(candidates) if len(c.ids) == len(parent)]
    if full:
        chosen = min(full, key=lambda i: (candidates[i].noise_probability,
                                          -candidates[i].beam_score, i))
    else:
        chosen = min(range(len(candidates)),
                     key=lambda i: (-len(candidates[i].ids),
                                    -candidates[i].beam_score, i))
    ld = levenshtein(candidates[chosen].sequence, truth) if truth is not None else None
    return MutationResult(parent=bytes(parent), candidates=tuple(candidates),
                          chosen=chosen, levenshtein_to_truth=ld)


def _noise_probability(noise_model, ids) -> float:
    if noise_model.n_classes != 2:
        raise ValueError("noise ranking needs a 2-class model")
    if len(ids) == 0:
        return 1.0
    return float(noise_model.classify(np.asarray(ids, dtype=np.int64))[1])


# -- Levenshtein ------------------------------------------------------------------

def levenshtein(a, b) -> int:
    """Unit-cost edit distance via the two-row dynamic program."""
    if isinstance(a, str):
        a = a.encode()
    if isinstance(b, str):
        b = b.encode()
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = cur
    return prev[-1]


def similarity(a, b) -> float:
    """1 - LD/len(b); the paper-style per-truth-length edit similarity."""
    return 1.0 - levenshtein(a, b) / max(len(b), 1)


# -- metrics ------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    n: int
    accuracy: float | None = None
    f1_binary: float | None = None
    f1_macro: float | None = None
    f1_per_class: tuple | None = None
    top1: float | None = None
    top5: float | None = None
    mean_ld: float | None = None
    median_ld: float | None = None
    mean_similarity: float | None = None


def classification_metrics(preds, truths) -> dict:
    """Accuracy plus per-class, macro, and (for 2 classes) binary F1."""
    if len(preds) != len(truths):
        raise ValueError("prediction/truth length mismatch")
    if not preds:
        raise ValueError("empty input")
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    classes = sorted(set(preds.tolist()) | set(truths.tolist()))
    f1s = []
    for c in classes:
        tp = int(((preds == c) & (truths == c)).sum())
        fp = int(((preds == c) & (truths != c)).sum())
        fn = int(((preds != c) & (truths == c)).sum())
        f1s.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)
    report = {
        "n": len(preds),
        "accuracy": float((preds == truths).mean()),
        "f1_per_class": {c: f for c, f in zip(classes, f1s)},
        "f1_macro": float(np.mean(f1s)),
    }
    if len(classes) == 2:
        report["f1_binary"] = f1s[classes.index(1)] if 1 in classes else 0.0
    return report


def generation_metrics(candidate_lists, truths) -> dict:
    """Top-k exact-match rates and Levenshtein statistics of the top-1."""
    if len(candidate_lists) != len(truths):
        raise ValueError("prediction/truth length mismatch")
    if not truths:
        raise ValueError("empty input")
    top1 = top5 = 0
    lds, sims = [], []
    for cands, truth in zip(candidate_lists, truths):
        if isinstance(cands, (str, bytes)):
            cands = [cands]
        cands = [c.encode() if isinstance(c, str) else bytes(c) for c in cands]
        truth = truth.encode() if isinstance(truth, str) else bytes(truth)
        if cands and cands[0] == truth:
            top1 += 1
        if any(c == truth for c in cands[:5]):
            top5 += 1
        ld = levenshtein(cands[0], truth) if cands else len(truth)
        lds.append(ld)
        sims.append(1.0 - ld / max(len(truth), 1))
    return {
        "n": len(truths),
        "top1": top1 / len(truths),
        "top5": top5 / len(truths),
        "mean_ld": float(np.mean(lds)),
        "median_ld": float(np.median(lds)),
        "mean_similarity": float(np.mean(sims)),
    }


def metrics(preds, truths) -> MetricsReport:
    """Dispatching report: label lists or candidate lists against truths."""
    if not truths:
        raise ValueError("empty input")
    first = preds[0] if preds else None
    if isinstance(first, (int, np.integer)):
        rep = classification_metrics(preds, truths)
        return MetricsReport(n=rep["n"], accuracy=rep["accuracy"],
                             f1_binary=rep.get("f1_binary"),
                             f1_macro=rep["f1_macro"],
                             f1_per_class=tuple(sorted(rep["f1_per_class"].items())))
    rep = generation_metrics(preds, truths)
    return MetricsReport(n=rep["n"], top1=rep["top1"], top5=rep["top5"],
                         mean_ld=rep["mean_ld"], median_ld=rep["median_ld"],
                         mean_similarity=rep["mean_similarity"])
