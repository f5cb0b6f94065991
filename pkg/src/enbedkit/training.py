"""Span-corruption pretraining, collation, MLM evaluation, and fine-tuning.

Corruption follows the sentinel scheme: each masked span is replaced by
one indexed sentinel in the input, and the target lists every sentinel
followed by the span it hides, closed with EOS. Splicing the target spans
back into the input at the sentinel positions reconstructs the original
sequence exactly; tests lean on that inverse.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import numerics as nm
from . import tokenizer as tok
from .numerics import AdamWState, WarmupLinearSchedule, adamw_step, derive_seed
from .tokenizer import EOS_ID, PAD_ID, SENTINEL_BASE, SentinelExhaustedError, sentinel


@dataclass(frozen=True)
class SpanCorruptionSpec:
    mask_rate: float = 0.15
    mean_span: int = 20

    def __post_init__(self):
        if not 0.0 <= self.mask_rate < 1.0:
            raise ValueError(f"mask_rate {self.mask_rate} outside [0, 1)")
        if self.mean_span < 1:
            raise ValueError("mean_span must be >= 1")


@lru_cache(maxsize=None)
def _geometric_p(mean_span: int) -> float:
    """Geometric parameter whose clamp-at-2*mean mean equals mean_span.

    Clamping min(Geom(p), 2m) pulls the mean below 1/p, so p is solved by
    bisection to keep the empirical span mean on target.
    """
    m, c = float(mean_span), 2 * mean_span
    if mean_span == 1:
        return 1.0

    def clamped_mean(q):  # E[min(X, c)] = (1 - q^c) / (1 - q)
        return (1.0 - q**c) / (1.0 - q)

    lo, hi = 1e-12, 1.0 - 1e-12
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if clamped_mean(mid) < m:
            lo = mid
        else:
            hi = mid
    return 1.0 - 0.5 * (lo + hi)


def _sample_span_length(spec: SpanCorruptionSpec, rng) -> int:
    p = _geometric_p(spec.mean_span)
    return min(int(rng.geometric(p)), 2 * spec.mean_span)


def corrupt_spans(tokens, spec: SpanCorruptionSpec, rng):
    """Split ``tokens`` into a sentinel-masked input and a span target.

    The span count is the stochastic rounding of mask_rate * L / mean_span
    (so the expected masked fraction is exactly mask_rate); span lengths
    are clamped-geometric around mean_span; starts are drawn uniformly and
    re-drawn on overlap, keeping at least one un-masked token between
    spans.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    L = len(tokens)
    if L < spec.mean_span:
        raise ValueError(f"sequence length {L} below mean span {spec.mean_span}")
    if tokens.size and tokens.max() >= 256:
        raise ValueError("corrupt_spans expects raw byte tokens without specials")

    want = spec.mask_rate * L / spec.mean_span
    n_spans = int(want) + (1 if rng.random() < want - int(want) else 0)
    if n_spans == 0:
        return tokens.copy(), np.array([EOS_ID], dtype=np.int64)
    if n_spans > tok.N_SENTINELS:
        raise SentinelExhaustedError(
            f"{n_spans} spans exceed the {tok.N_SENTINELS} available sentinels"
        )

    occupied = np.zeros(L, dtype=bool)
    spans = []
    for _ in range(n_spans):
        length = _sample_span_length(spec, rng)
        placed = False
        while not placed:
            for _attempt in range(200):
                length = min(length, L)
                start = int(rng.integers(0, L - length + 1))
                lo, hi = max(0, start - 1), min(L, start + length + 1)
                if not occupied[lo:hi].any():
                    occupied[start : start + length] = True
                    spans.append((start, length))
                    placed = True
                    break
            else:
                if length == 1:
                    raise ValueError("could not place spans; sequence too dense")
                length = max(1, length // 2)  # crowded: retry shorter

    spans.sort()
    input_ids, target_ids = [], []
    cursor = 0
    for i, (start, length) in enumerate(spans):
        input_ids.extend(tokens[cursor:start])
        input_ids.append(sentinel(i))
        target_ids.append(sentinel(i))
        target_ids.extend(tokens[start : start + length])
        cursor = start + length
    input_ids.extend(tokens[cursor:])
    target_ids.append(EOS_ID)
    return np.array(input_ids, dtype=np.int64), np.array(target_ids, dtype=np.int64)


def splice_back(input_ids, target_ids):
    """Inverse of corrupt_spans: re-insert target spans at their sentinels."""
    out = []
    spans = {}
    current = None
    for t in np.asarray(target_ids, dtype=np.int64):
        if t == EOS_ID:
            break
        if tok.is_sentinel(int(t)):
            current = int(t)
            spans[current] = []
        else:
            spans[current].append(int(t))
    for t in np.asarray(input_ids, dtype=np.int64):
        if tok.is_sentinel(int(t)):
            out.extend(spans.get(int(t), []))
        else:
            out.append(int(t))
    return np.array(out, dtype=np.int64)


@dataclass
class Batch:
    input_ids: np.ndarray  # [B, L_in]
    input_mask: np.ndarray  # True at real tokens
    target_ids: np.ndarray  # [B, L_out]
    target_mask: np.ndarray


def collate(examples, max_in, max_out) -> Batch:
    """Right-pad (and truncate) (input, target) id pairs into one batch."""
    if not examples:
        raise ValueError("cannot collate an empty batch")
    B = len(examples)
    L_in = min(max_in, max(len(i) for i, _ in examples))
    L_out = min(max_out, max(len(t) for _, t in examples))
    input_ids = np.full((B, L_in), PAD_ID, dtype=np.int64)
    target_ids = np.full((B, L_out), PAD_ID, dtype=np.int64)
    input_mask = np.zeros((B, L_in), dtype=bool)
    target_mask = np.zeros((B, L_out), dtype=bool)
    for b, (inp, tgt) in enumerate(examples):
        ni, nt = min(len(inp), L_in), min(len(tgt), L_out)
        input_ids[b, :ni] = inp[:ni]
        target_ids[b, :nt] = tgt[:nt]
        input_mask[b, :ni] = True
        target_mask[b, :nt] = True
    return Batch(input_ids, input_mask, target_ids, target_mask)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1000
    batch_size: int = 8
    crop_len: int = 128
    peak_lr: float = 1e-5
    weight_decay: float = 0.01
    seed: int = 0
    eval_interval: int = 200
    eval_examples: int = 64
    heldout_fraction: float = 0.01
    span: SpanCorruptionSpec = field(default_factory=SpanCorruptionSpec)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


def split_corpus(segments, fraction, seed, min_bases=0):
    """Deterministic train/heldout split, disjoint by construction.

    Many segments: a seeded 1-in-1/fraction subset of whole segments.
    Few segments: the tail slice of each segment is held out, so training
    crops (drawn from the head) never overlap evaluation data.
    """
    segments = list(segments)
    if len(segments) >= 100:
        rng = np.random.default_rng(derive_seed(seed, "split"))
        order = rng.permutation(len(segments))
        n_held = max(1, int(len(segments) * fraction))
        held_idx = set(order[:n_held].tolist())
        train = [s for i, s in enumerate(segments) if i not in held_idx]
        held = [s for i, s in enumerate(segments) if i in held_idx]
        return train, held
    train, held = [], []
    for seg in segments:
        h = max(int(math.ceil(len(seg) * fraction)), min_bases)
        h = min(h, len(seg) // 2)
        if h == 0:
            train.append(seg)
        else:
            train.append(seg[:-h])
            held.append(seg[-h:])
    return train, held


def _sample_crop(segments, crop_len, rng):
    """Uniform fixed-length crop; segments weighted by crop-start count."""
    weights = np.array([max(len(s) - crop_len + 1, 1) for s in segments], dtype=np.float64)
    i = int(rng.choice(len(segments), p=weights / weights.sum()))
    seg = segments[i]
    if len(seg) <= crop_len:
        return seg
    start = int(rng.integers(0, len(seg) - crop_len + 1))
    return seg[start : start + crop_len]


def _mlm_batch(segments, config, rng_seed, step):
    examples = []
    for b in range(config.batch_size):
        rng = np.random.default_rng(derive_seed(rng_seed, "example", step, b))
        crop = _sample_crop(segments, config.crop_len, rng)
        ids = tok.encode(crop)
        examples.append(corrupt_spans(ids, config.span, rng))
    max_out = 2 * int(config.span.mask_rate * config.crop_len) + 2 * tok.N_SENTINELS
    return collate(examples, config.crop_len, max_out)


def _seq2seq_loss(model, batch: Batch, training, rng):
    enc = model.encode(batch.input_ids, pad_mask=batch.input_mask,
                       training=training, rng=rng)
    logits = model.decode_logits(batch.target_ids, enc, enc_valid=batch.input_mask,
                                 training=training, rng=rng)
    targets = np.where(batch.target_mask, batch.target_ids, -1)
    return nm.cross_entropy_with_logits(logits, targets, ignore_id=-1)


def pretrain(model, corpus, config: PretrainConfig, checkpoint_stem=None,
             on_step=None, start_step=0):
    """Span-corruption MLM training; returns (model, log rows).

    Log rows are (step, loss, lr, mlm_accuracy-or-None); MLM accuracy on
    the heldout slice is evaluated (and a checkpoint written, when a stem
    is given) every ``eval_interval`` steps and at the end.
    """
    segments = corpus.segments if hasattr(corpus, "segments") else list(corpus)
    train_segs, held_segs = split_corpus(segments, config.heldout_fraction,
                                         config.seed, min_bases=config.crop_len)
    if not train_segs:
        raise ValueError("corpus is empty after the heldout split")
    schedule = WarmupLinearSchedule(peak_lr=config.peak_lr, total_steps=max(config.steps, 1))
    state = AdamWState(weight_decay=config.weight_decay)
    state.step = start_step
    log = []
    for step in range(start_step, start_step + config.steps):
        batch = _mlm_batch(train_segs, config, config.seed, step)
        drop_rng = np.random.default_rng(derive_seed(config.seed, "dropout", step))
        nm.zero_grads(model.params.values())
        loss = _seq2seq_loss(model, batch, training=True, rng=drop_rng)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {step}")
        loss.backward()
        lr = schedule.lr_at(step + 1 - start_step)
        adamw_step(model.params, state, lr)
        acc = None
        done = step + 1 - start_step
        if (config.eval_interval and done % config.eval_interval == 0) or done == config.steps:
            acc = mlm_accuracy(model, held_segs, config.span,
                               seed=derive_seed(config.seed, "eval", step),
                               crop_len=config.crop_len, n_examples=config.eval_examples)
            if checkpoint_stem is not None:
                model.save_checkpoint(checkpoint_stem, step=step + 1)
        log.append((step, value, lr, acc))
        if on_step is not None:
            on_step(step, value, lr, acc)
    return model, log


def mlm_accuracy(model, heldout_segments, spec: SpanCorruptionSpec, seed,
                 crop_len=128, n_examples=64, restrict_to_alphabet=True):
    """Fraction of masked tokens recovered at their target positions.

    Greedy recovery is teacher-forced: each target position takes the
    argmax given the gold prefix. Only masked byte tokens count; sentinel
    and EOS positions are excluded. With ``restrict_to_alphabet`` the
    argmax runs over the byte values present in the heldout data, so an
    untrained model scores at chance (1/alphabet) rather than near zero
    across the 384-way vocabulary.
    """
    segments = [s for s in heldout_segments if len(s) >= spec.mean_span]
    if not segments:
        raise ValueError("no heldout segments long enough to evaluate")
    allowed = None
    if restrict_to_alphabet:
        present = set()
        for seg in segments:
            present.update(seg)
        allowed = np.array(sorted(present), dtype=np.int64)
    hits = total = 0
    with nm.no_grad():
        # overdraw if early examples happen to get zero spans
        for i in range(4 * n_examples):
            if i >= n_examples and total > 0:
                break
            rng = np.random.default_rng(derive_seed(seed, "mlm_eval", i))
            crop = _sample_crop(segments, crop_len, rng)
            ids = tok.encode(crop)
            inp, target = corrupt_spans(ids, spec, rng)
            enc = model.encode(inp)
            logits = model.decode_logits(target, enc).data
            masked = target < 256
            if not masked.any():
                continue
            rows = logits[masked]
            if allowed is not None:
                pred = allowed[np.argmax(rows[:, allowed], axis=-1)]
            else:
                pred = np.argmax(rows, axis=-1)
            hits += int((pred == target[masked]).sum())
            total += int(masked.sum())
    if total == 0:
        raise ValueError("no masked tokens were produced during evaluation")
    return hits / total


@dataclass(frozen=True)
class UnfreezeSchedule:
    """Per-group training start steps; head first, then deeper groups."""

    entries: tuple  # ((group_name, start_step, (param names...)), ...)

    @classmethod
    def from_model(cls, model, total_steps, cadence_fraction=0.10, head_only=False):
        """One group unfreezes per ``cadence_fraction`` of the run."""
        groups = model.parameter_groups()
        entries = []
        for i, (name, names) in enumerate(groups):
            if head_only:
                start = 0 if i == 0 else total_steps + 1
            else:
                start = int(round(i * cadence_fraction * total_steps))
            entries.append((name, start, tuple(names)))
        return cls(tuple(entries))

    def unfrozen(self, step):
        out = []
        for _name, start, names in self.entries:
            if step >= start:
                out.extend(names)
        return out


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 500
    batch_size: int = 8
    peak_lr: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    heldout_fraction: float = 0.1
    unfreeze_cadence: float = 0.10
    eval_examples: int = 256
    max_new_slack: int = 8


def _split_examples(examples, fraction, seed):
    rng = np.random.default_rng(derive_seed(seed, "finetune_split"))
    order = rng.permutation(len(examples))
    n_held = max(1, int(len(examples) * fraction))
    held = [examples[i] for i in order[:n_held]]
    train = [examples[i] for i in order[n_held:]]
    if not train:
        raise ValueError("dataset too small for the requested heldout fraction")
    return train, held


def finetune_classifier(model, dataset, config: FinetuneConfig, unfreeze=None,
                        on_step=None):
    """Classification fine-tune under gradual unfreezing.

    Only groups the schedule has released receive optimizer updates, so
    frozen parameters stay bit-identical. Returns (model, report dict).
    """
    if not dataset:
        raise ValueError("empty dataset")
    n_classes = model.n_classes
    if n_classes is None:
        raise ValueError("model needs a classification head (build with n_classes)")
    for ex in dataset:
        if not 0 <= ex.label < n_classes:
            raise ValueError(f"label {ex.label} outside [0, {n_classes})")
    train, held = _split_examples(dataset, config.heldout_fraction, config.seed)
    if unfreeze is None:
        unfreeze = UnfreezeSchedule.from_model(model, config.steps, config.unfreeze_cadence)
    schedule = WarmupLinearSchedule(peak_lr=config.peak_lr, total_steps=max(config.steps, 1))
    state = AdamWState(weight_decay=config.weight_decay)
    log = []
    for step in range(config.steps):
        rng = np.random.default_rng(derive_seed(config.seed, "clf_batch", step))
        idx = rng.integers(0, len(train), size=config.batch_size)
        seqs = [tok.encode(train[i].sequence) for i in idx]
        labels = np.array([train[i].label for i in idx], dtype=np.int64)
        batch = collate([(s, np.zeros(1, dtype=np.int64)) for s in seqs],
                        model.config.max_len, 1)
        drop_rng = np.random.default_rng(derive_seed(config.seed, "clf_dropout", step))
        nm.zero_grads(model.params.values())
        logits = model.classify_logits(batch.input_ids, pad_mask=batch.input_mask,
                                       training=True, rng=drop_rng)
        loss = nm.cross_entropy_with_logits(logits, labels)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {step}")
        loss.backward()
        live = {n: model.params[n] for n in unfreeze.unfrozen(step)}
        adamw_step(live, state, schedule.lr_at(step + 1))
        log.append((step, value))
        if on_step is not None:
            on_step(step, value)
    report = evaluate_classifier(model, held)
    report["log"] = log
    return model, report


def evaluate_classifier(model, examples, batch_size=32):
    """Heldout accuracy and per-class F1 for a labeled example list."""
    from .tasks import classification_metrics

    preds, truths = [], []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i : i + batch_size]
        seqs = [tok.encode(ex.sequence) for ex in chunk]
        batch = collate([(s, np.zeros(1, dtype=np.int64)) for s in seqs],
                        model.config.max_len, 1)
        probs = model.classify(batch.input_ids, pad_mask=batch.input_mask)
        preds.extend(np.argmax(probs, axis=-1).tolist())
        truths.extend(ex.label for ex in chunk)
    return classification_metrics(preds, truths)


def finetune_seq2seq(model, pairs, config: FinetuneConfig, unfreeze=None, on_step=None):
    """Teacher-forced sequence-to-sequence fine-tune; returns (model, report).

    Targets get an EOS appended; pairs longer than max_len are truncated
    with a warning. The report carries heldout exact-match (greedy decode
    equals the target string) and teacher-forced token accuracy.
    """
    if not pairs:
        raise ValueError("empty dataset")
    max_len = model.config.max_len
    prepared = []
    for pair in pairs:
        src, tgt = tok.encode(pair.source), tok.encode(pair.target)
        if len(src) > max_len or len(tgt) + 1 > max_len:
            warnings.warn(f"pair of lengths ({len(src)}, {len(tgt)}) truncated to max_len "
                          f"{max_len}", stacklevel=2)
            src, tgt = src[:max_len], tgt[: max_len - 1]
        prepared.append((src, np.append(tgt, EOS_ID)))
    train, held = _split_examples(prepared, config.heldout_fraction, config.seed)
    if unfreeze is None:
        unfreeze = UnfreezeSchedule.from_model(model, config.steps, config.unfreeze_cadence)
    schedule = WarmupLinearSchedule(peak_lr=config.peak_lr, total_steps=max(config.steps, 1))
    state = AdamWState(weight_decay=config.weight_decay)
    log = []
    for step in range(config.steps):
        rng = np.random.default_rng(derive_seed(config.seed, "s2s_batch", step))
        idx = rng.integers(0, len(train), size=config.batch_size)
        batch = collate([train[i] for i in idx], max_len, max_len)
        drop_rng = np.random.default_rng(derive_seed(config.seed, "s2s_dropout", step))
        nm.zero_grads(model.params.values())
        loss = _seq2seq_loss(model, batch, training=True, rng=drop_rng)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {step}")
        loss.backward()
        live = {n: model.params[n] for n in unfreeze.unfrozen(step)}
        adamw_step(live, state, schedule.lr_at(step + 1))
        log.append((step, value))
        if on_step is not None:
            on_step(step, value)
    report = evaluate_seq2seq(model, held, slack=config.max_new_slack)
    report["log"] = log
    return model, report


def evaluate_seq2seq(model, prepared_pairs, slack=8):
    """Exact-match (greedy) and teacher-forced token accuracy on id pairs."""
    exact = 0
    tok_hits = tok_total = 0
    with nm.no_grad():
        for src, tgt in prepared_pairs:
            content = tgt[:-1]  # strip EOS
            out = model.generate_greedy(src, max_new=len(content) + slack)
            if len(out) == len(content) and np.array_equal(out, content):
                exact += 1
            enc = model.encode(src)
            logits = model.decode_logits(tgt, enc).data
            pred = np.argmax(logits, axis=-1)
            tok_hits += int((pred == tgt).sum())
            tok_total += len(tgt)
    return {
        "exact_match": exact / len(prepared_pairs),
        "token_accuracy": tok_hits / max(tok_total, 1),
        "n_eval": len(prepared_pairs),
    }
