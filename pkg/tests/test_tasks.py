import numpy as np
import pytest

from enbedkit import tasks
from enbedkit import tokenizer as tok
from enbedkit.model import build, toy_config
from enbedkit.tasks import (
    EVENT_COPY,
    EVENT_DELETE,
    EVENT_INSERT,
    EVENT_SUBSTITUTE,
    TELOMERE_MOTIF,
    MetricsReport,
    NoiseSpec,
    build_noise_dataset,
    classification_metrics,
    detect_noise,
    generate_mutation,
    generation_metrics,
    inject_noise,
    levenshtein,
    metrics,
    sample_read,
    simulate_reference,
    similarity,
)


def levenshtein_oracle(a, b):
    """Full-matrix dynamic program, kept independent of the two-row path."""
    if isinstance(a, str):
        a = a.encode()
    if isinstance(b, str):
        b = b.encode()
    n, m = len(a), len(b)
    D = np.zeros((n + 1, m + 1), dtype=np.int64)
    D[:, 0] = np.arange(n + 1)
    D[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i, j] = min(
                D[i - 1, j] + 1,
                D[i, j - 1] + 1,
                D[i - 1, j - 1] + (a[i - 1] != b[j - 1]),
            )
    return int(D[n, m])


def random_dna(rng, n):
    return rng.choice(np.frombuffer(b"ACGT", dtype=np.uint8), size=n).tobytes()


# -- reference simulation -----------------------------------------------------

def test_reference_fraction_zero_has_no_regions():
    ref = simulate_reference(2048, 0.0, seed=0)
    assert ref.repeat_regions == ()
    assert len(ref) == 2048
    assert set(ref.sequence) <= set(b"ACGT")


def test_reference_fraction_one_is_pure_motif():
    ref = simulate_reference(2048, 1.0, seed=1)
    tiled = (TELOMERE_MOTIF * (2048 // 6 + 1))[:2048]
    assert ref.sequence == tiled
    assert ref.repeat_regions == ((0, 2048),)


def test_reference_half_coverage_tally():
    ref = simulate_reference(10**6, 0.5, seed=2)
    assert abs(ref.repeat_bases / len(ref) - 0.5) < 0.02
    # regions are exact motif tilings
    for a, b in ref.repeat_regions[:10]:
        seg = ref.sequence[a:b]
        assert seg == (TELOMERE_MOTIF * ((b - a) // 6 + 1))[: b - a]


def test_reference_deterministic_and_validated():
    a = simulate_reference(4096, 0.3, seed=3)
    b = simulate_reference(4096, 0.3, seed=3)
    assert a.sequence == b.sequence and a.repeat_regions == b.repeat_regions
    with pytest.raises(ValueError):
        simulate_reference(512, 0.3, seed=0)
    with pytest.raises(ValueError):
        simulate_reference(2048, 1.5, seed=0)


def test_in_repeat_agrees_with_regions():
    ref = simulate_reference(8192, 0.4, seed=4)
    flags = np.zeros(len(ref), dtype=bool)
    for a, b in ref.repeat_regions:
        flags[a:b] = True
    for pos in np.random.default_rng(0).integers(0, len(ref), size=200):
        assert ref.in_repeat(int(pos)) == flags[pos]


# -- read sampling ----------------------------------------------------------------

def test_sample_read_bias_zero_uniform():
    ref = simulate_reference(4096, 0.2, seed=5)
    rng = np.random.default_rng(1)
    read = sample_read(ref, rng, read_len=128, telomere_bias=0.0)
    assert len(read) == 128
    assert read in ref.sequence


def test_sample_read_bias_one_always_in_motif():
    ref = simulate_reference(8192, 0.3, seed=6)
    rng = np.random.default_rng(2)
    for _ in range(50):
        _, start = sample_read(ref, rng, read_len=64, telomere_bias=1.0,
                               return_start=True)
        assert ref.in_repeat(start)


def test_sample_read_monte_carlo_bias():
    # small motif fraction so unbiased draws rarely land in a region
    ref = simulate_reference(200_000, 0.01, seed=7)
    rng = np.random.default_rng(3)
    hits = sum(
        ref.in_repeat(sample_read(ref, rng, read_len=512, telomere_bias=0.6,
                                  return_start=True)[1])
        for _ in range(10_000)
    )
    assert abs(hits / 10_000 - 0.6) < 0.02


def test_sample_read_errors():
    ref = simulate_reference(2048, 0.0, seed=8)
    rng = np.random.default_rng(4)
    with pytest.raises(ValueError, match="repeat region"):
        sample_read(ref, rng, read_len=64, telomere_bias=0.5)
    with pytest.raises(ValueError, match="read_len"):
        sample_read(ref, rng, read_len=4096, telomere_bias=0.0)


# -- noise injection -----------------------------------------------------------------

def test_inject_noise_zero_spec_is_identity():
    rng = np.random.default_rng(5)
    seq = random_dna(rng, 2000)
    assert inject_noise(seq, NoiseSpec(0.0, 0.0, 0.0), rng) == seq


def test_inject_noise_rejects_non_acgt():
    with pytest.raises(ValueError, match="position 2"):
        inject_noise(b"ACNGT", NoiseSpec(), np.random.default_rng(0))


def test_inject_noise_event_rates_and_replay():
    rng_seq = np.random.default_rng(6)
    seq = random_dna(rng_seq, 10**6)
    spec = NoiseSpec(0.02, 0.02, 0.02)
    noisy, events = inject_noise(seq, spec, np.random.default_rng(7), return_events=True)
    n = len(seq)
    rates = {e: float((events == e).mean()) for e in range(4)}
    assert abs(rates[EVENT_DELETE] - 0.02) < 0.002
    assert abs(rates[EVENT_SUBSTITUTE] - 0.02) < 0.002
    assert abs(rates[EVENT_INSERT] - 0.02) < 0.002
    assert abs(rates[EVENT_COPY] - 0.94) < 0.005
    assert abs(len(noisy) / n - 1.0) < 0.003
    # replay oracle: event trace + input fully determine the output layout
    out_pos = 0
    for i, e in enumerate(events[:5000]):
        if e == EVENT_DELETE:
            continue
        if e == EVENT_SUBSTITUTE:
            assert noisy[out_pos] != seq[i]
            out_pos += 1
        elif e == EVENT_INSERT:
            assert noisy[out_pos] == seq[i]
            out_pos += 2
        else:
            assert noisy[out_pos] == seq[i]
            out_pos += 1


def test_inject_noise_substitution_only_hamming():
    rng = np.random.default_rng(8)
    seq = random_dna(rng, 10**6)
    noisy = inject_noise(seq, NoiseSpec(0.0, 0.0, 0.02), np.random.default_rng(9))
    assert len(noisy) == len(seq)
    mism = sum(a != b for a, b in zip(noisy, seq))
    assert abs(mism / len(seq) - 0.02) < 0.002


def test_inject_noise_length_shift_matches_rates():
    rng = np.random.default_rng(10)
    seq = random_dna(rng, 500_000)
    longer = inject_noise(seq, NoiseSpec(p_insert=0.04, p_delete=0.0, p_substitute=0.0),
                          np.random.default_rng(11))
    shorter = inject_noise(seq, NoiseSpec(p_insert=0.0, p_delete=0.04, p_substitute=0.0),
                           np.random.default_rng(12))
    assert abs(len(longer) / len(seq) - 1.04) < 0.003
    assert abs(len(shorter) / len(seq) - 0.96) < 0.003


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(0.5, 0.4, 0.2)
    with pytest.raises(ValueError):
        NoiseSpec(-0.1, 0.0, 0.0)
    assert NoiseSpec().clean_rate == pytest.approx(0.94)


# -- dataset construction -----------------------------------------------------------------

@pytest.fixture(scope="module")
def noise_dataset():
    ref = simulate_reference(100_000, 0.3, seed=13)
    data = build_noise_dataset(ref, 100, NoiseSpec(), seed=14)
    return ref, data


def test_noise_dataset_balance(noise_dataset):
    _, data = noise_dataset
    labels = [ex.label for ex in data]
    assert labels.count(0) == 50 and labels.count(1) == 50


def test_noise_dataset_fixed_length(noise_dataset):
    _, data = noise_dataset
    assert all(len(ex.sequence) == 512 for ex in data)


def test_noise_dataset_clean_reads_match_reference(noise_dataset):
    ref, data = noise_dataset
    for ex in data:
        if ex.label == 0:
            assert ex.sequence in ref.sequence


def test_noise_dataset_odd_count_rejected(noise_dataset):
    ref, _ = noise_dataset
    with pytest.raises(ValueError, match="even"):
        build_noise_dataset(ref, 7, NoiseSpec(), seed=0)


# -- detection ----------------------------------------------------------------------------

def test_detect_noise_probability_complement():
    model = build(toy_config(n_encoder_layers=2, n_decoder_layers=1, d_model=32,
                             d_kv=8, d_ff=64, heads=2, max_len=512,
                             r_small=4, r_large=8, k_blocks=2),
                  seed=15, n_classes=2)
    rng = np.random.default_rng(16)
    seq = random_dna(rng, 100)
    p = detect_noise(model, seq)
    probs = model.classify(tok.encode(seq))
    assert 0.0 <= p <= 1.0
    assert abs(probs.sum() - 1.0) < 1e-9
    assert p == pytest.approx(float(probs[1]))
    assert detect_noise(model, seq) == p  # eval determinism


def test_detect_noise_requires_two_class_head():
    model = build(toy_config(n_encoder_layers=2, n_decoder_layers=1, d_model=32,
                             d_kv=8, d_ff=64, heads=2, r_small=4, r_large=8,
                             k_blocks=2), seed=17, n_classes=3)
    with pytest.raises(ValueError):
        detect_noise(model, b"ACGT")


# -- levenshtein -------------------------------------------------------------------------------

def test_levenshtein_basics():
    assert levenshtein("ACGT", "ACGT") == 0
    assert levenshtein("ACGT", "AGT") == 1
    assert levenshtein("", "ACGT") == 4
    assert levenshtein("AAAA", "TTTT") == 4


def test_levenshtein_against_full_matrix_oracle():
    rng = np.random.default_rng(18)
    for _ in range(120):
        a = random_dna(rng, int(rng.integers(0, 64)))
        b = random_dna(rng, int(rng.integers(0, 64)))
        assert levenshtein(a, b) == levenshtein_oracle(a, b)


def test_levenshtein_axioms():
    rng = np.random.default_rng(19)
    for _ in range(120):
        a = random_dna(rng, int(rng.integers(0, 40)))
        b = random_dna(rng, int(rng.integers(0, 40)))
        c = random_dna(rng, int(rng.integers(0, 40)))
        ab, ba = levenshtein(a, b), levenshtein(b, a)
        assert levenshtein(a, a) == 0
        assert ab == ba
        assert levenshtein(a, c) <= ab + levenshtein(b, c)
        assert ab <= max(len(a), len(b))


def test_levenshtein_prefix_is_length_difference():
    rng = np.random.default_rng(20)
    for _ in range(40):
        a = random_dna(rng, int(rng.integers(1, 50)))
        cut = int(rng.integers(0, len(a)))
        assert levenshtein(a, a[:cut]) == len(a) - cut


# -- mutation generation --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_models():
    cfg = toy_config(n_encoder_layers=2, n_decoder_layers=1, d_model=32, d_kv=8,
                     d_ff=64, heads=2, max_len=64, r_small=4, r_large=8, k_blocks=2)
    seq2seq = build(cfg, seed=21)
    noise = build(cfg, seed=22, n_classes=2)
    return seq2seq, noise


def test_generate_mutation_candidate_count_and_choice(tiny_models):
    seq2seq, noise = tiny_models
    parent = b"ACGTACGTACGT"
    result = generate_mutation(seq2seq, noise, parent, n_beams=5)
    assert len(result.candidates) == 5
    full = [c for c in result.candidates if len(c.ids) == len(parent)]
    chosen = result.candidates[result.chosen]
    if full:
        assert len(chosen.ids) == len(parent)
        assert chosen.noise_probability == min(c.noise_probability for c in full)
    else:
        assert len(chosen.ids) == max(len(c.ids) for c in result.candidates)


def test_generate_mutation_truth_distance(tiny_models):
    seq2seq, noise = tiny_models
    parent = b"ACGTACGTACGT"
    result = generate_mutation(seq2seq, noise, parent, n_beams=3, truth=parent)
    assert result.levenshtein_to_truth == levenshtein(result.child, parent)


def test_generate_mutation_rejects_empty_parent(tiny_models):
    seq2seq, noise = tiny_models
    with pytest.raises(ValueError):
        generate_mutation(seq2seq, noise, b"", n_beams=2)


# -- metrics ------------------------------------------------------------------------------------------

def test_generation_metrics_all_exact():
    preds = [["ACGT"], ["GGTT"], ["AAAA"]]
    truths = ["ACGT", "GGTT", "AAAA"]
    rep = generation_metrics(preds, truths)
    assert rep["top1"] == 1.0 and rep["top5"] == 1.0
    assert rep["mean_ld"] == 0.0 and rep["median_ld"] == 0.0
    assert rep["mean_similarity"] == 1.0


def test_similarity_paper_figure():
    # 2.3 mean edits over length-500 truths -> 99.54% similarity
    lds = [2, 3, 2, 2, 3, 2, 2, 3, 2, 2]  # mean 2.3
    sims = [1 - ld / 500 for ld in lds]
    assert abs(np.mean(sims) - 0.9954) < 1e-12
    assert similarity(b"A" * 498, b"A" * 500) == pytest.approx(1 - 2 / 500)


def test_binary_f1_perfect_positive():
    rep = classification_metrics([1, 0, 0], [1, 0, 0])
    assert rep["f1_binary"] == 1.0
    assert rep["accuracy"] == 1.0


def test_top1_never_exceeds_top5():
    rng = np.random.default_rng(23)
    truths = [random_dna(rng, 8) for _ in range(50)]
    preds = []
    for t in truths:
        cands = [random_dna(rng, 8) for _ in range(4)]
        if rng.random() < 0.5:
            cands.insert(int(rng.integers(0, 5)), t)
        else:
            cands.append(random_dna(rng, 8))
        preds.append(cands)
    rep = generation_metrics(preds, truths)
    assert rep["top1"] <= rep["top5"]


def test_metrics_dispatch():
    rep = metrics([1, 0, 1], [1, 0, 0])
    assert isinstance(rep, MetricsReport)
    assert rep.accuracy == pytest.approx(2 / 3)
    assert rep.top1 is None
    rep2 = metrics([["ACGT"]], ["ACGT"])
    assert rep2.top1 == 1.0 and rep2.accuracy is None
    with pytest.raises(ValueError):
        metrics([], [])


def test_classification_metrics_macro_multiclass():
    rep = classification_metrics([0, 1, 2, 2], [0, 1, 1, 2])
    assert rep["accuracy"] == 0.75
    assert set(rep["f1_per_class"]) == {0, 1, 2}
    assert "f1_binary" not in rep
