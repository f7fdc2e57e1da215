"""Generator self-consistency: reproducibility, calibration targets, and
agreement between sampled data and the closed-form oracles."""

import numpy as np
import pytest

from cauliflow.corpus import (BOUNDARY, PHONEME, PUNCTUATION, corpus_stats, save_corpus,
                              validate_corpus)
from cauliflow.metrics import jsd_histograms
from cauliflow.synthdata import (GeneratorSpec, PhonemeContext, SeparatorContext,
                                 expected_words_per_second, generate_corpus,
                                 oracle_best_fbeta, oracle_conditional, oracle_mean,
                                 pause_probability, posterior_pause_probability)


@pytest.fixture(scope="module")
def big_corpus():
    return generate_corpus(GeneratorSpec(seed=1), 2000, with_trace=True)


class TestReproducibility:
    def test_same_seed_byte_identical_files(self, tmp_path):
        for d in ("a", "b"):
            save_corpus(generate_corpus(GeneratorSpec(seed=33), 25), tmp_path / d)
        for name in ("utterances.jsonl", "inventory.txt", "word_features.tsv",
                     "speaker_vectors.tsv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_different_seeds_differ(self):
        a = generate_corpus(GeneratorSpec(seed=1), 5)
        b = generate_corpus(GeneratorSpec(seed=2), 5)
        assert any(x.durations().tolist() != y.durations().tolist()
                   for x, y in zip(a.utterances, b.utterances))

    def test_disjoint_index_ranges_are_independent_streams(self):
        whole = generate_corpus(GeneratorSpec(seed=7), 10)
        tail = generate_corpus(GeneratorSpec(seed=7), 4, id_offset=6)
        for a, b in zip(whole.utterances[6:], tail.utterances):
            assert a.id == b.id
            np.testing.assert_array_equal(a.durations(), b.durations())


class TestValidity:
    def test_generated_corpus_passes_validation(self):
        validate_corpus(generate_corpus(GeneratorSpec(seed=5), 50))


class TestCalibration:
    def test_boundary_pause_rate_within_one_point(self, big_corpus):
        corpus, _ = big_corpus
        spec = GeneratorSpec(seed=1)
        n = paused = 0
        for utt in corpus.utterances:
            for tok in utt.tokens:
                if tok.kind == BOUNDARY:
                    n += 1
                    paused += tok.duration >= 4
        assert abs(paused / n - spec.boundary_pause_rate) < 0.01

    def test_share_of_pauses_at_word_boundaries(self, big_corpus):
        # most pauses sit at punctuation, but a solid minority (>20%,
        # around a fifth to a quarter) occur at plain word boundaries
        corpus, _ = big_corpus
        at_boundary = at_punct = 0
        for utt in corpus.utterances:
            for tok in utt.tokens:
                if tok.duration >= 4 and tok.kind == BOUNDARY:
                    at_boundary += 1
                elif tok.duration >= 4 and tok.kind == PUNCTUATION:
                    at_punct += 1
        share = at_boundary / (at_boundary + at_punct)
        assert 0.18 <= share <= 0.28

    def test_speech_rate_matches_analytic_value(self, big_corpus):
        corpus, _ = big_corpus
        stats = corpus_stats(corpus.utterances)
        expected = expected_words_per_second(GeneratorSpec(seed=1))
        assert abs(stats.words_per_second_mean - expected) / expected < 0.02

    def test_per_symbol_means_match_oracle(self, big_corpus):
        # empirical mean per symbol vs the mean of that symbol's exact
        # conditional means over the realized contexts
        corpus, traces = big_corpus
        spec = GeneratorSpec(seed=1)
        sums = {}
        for utt, trace in zip(corpus.utterances, traces):
            for tok, ctx in zip(utt.tokens, trace.contexts):
                if tok.kind != PHONEME:
                    continue
                got, want, count = sums.get(ctx.symbol, (0.0, 0.0, 0))
                sums[ctx.symbol] = (got + tok.duration, want + oracle_mean(spec, ctx),
                                    count + 1)
        checked = 0
        for symbol, (got, want, count) in sums.items():
            if count >= 400:
                assert abs(got - want) / want < 0.02, symbol
                checked += 1
        assert checked >= 10


class TestOracle:
    def test_separator_mixture_by_construction(self):
        spec = GeneratorSpec(seed=1)
        ctx = SeparatorContext(kind=PUNCTUATION, suitability=0.3, pausing_factor=1.0,
                               paused=True)
        support, pmf = oracle_conditional(spec, ctx)
        assert pmf.sum() == pytest.approx(1.0, abs=1e-12)
        p = pause_probability(spec, PUNCTUATION, 0.3, 1.0)
        # mass above the pause floor equals the link probability
        assert pmf[spec.pause_min:].sum() == pytest.approx(p, abs=1e-12)

    def test_boundary_high_suitability_pauses(self):
        spec = GeneratorSpec(seed=1)
        low = pause_probability(spec, BOUNDARY, -1.0, 1.0)
        high = pause_probability(spec, BOUNDARY, 3.0, 1.0)
        assert low < 0.01 < high

    def test_unknown_context_rejected(self):
        with pytest.raises(ValueError):
            oracle_conditional(GeneratorSpec(seed=1), "nonsense")

    def test_monte_carlo_matches_oracle_density(self, big_corpus):
        # pooled sample histogram vs the mixture of per-token oracle pmfs
        corpus, traces = big_corpus
        spec = GeneratorSpec(seed=1)
        max_d = 202
        sampled = np.zeros(max_d)
        analytic = np.zeros(max_d)
        count = 0
        for utt, trace in zip(corpus.utterances, traces):
            for tok, ctx in zip(utt.tokens, trace.contexts):
                sampled[min(int(tok.duration), max_d - 1)] += 1
                support, pmf = oracle_conditional(spec, ctx)
                analytic[np.minimum(support, max_d - 1)] += pmf
                count += 1
        assert count > 100_000
        assert jsd_histograms(sampled, analytic) < 0.01


class TestBayesOracle:
    def test_noiseless_deterministic_latent_gives_perfect_f(self):
        spec = GeneratorSpec(seed=2, feature_noise=0.0, pausing_sigma=1e-9,
                             suitability_gain=5000.0, punct_suitability_gain=5000.0,
                             pause_miss_rate=0.0)
        corpus = generate_corpus(spec, 120)
        best, _ = oracle_best_fbeta(spec, corpus)
        assert best == pytest.approx(1.0, abs=1e-9)

    def test_pure_noise_latent_matches_base_rate_brute_force(self):
        spec = GeneratorSpec(seed=3, suitability_gain=0.0, punct_suitability_gain=0.0,
                             pausing_sigma=1e-9)
        corpus = generate_corpus(spec, 120)
        best, theta = oracle_best_fbeta(spec, corpus, beta=0.25)
        # posterior is constant per kind; brute force over the two
        # possible decision rules (all-boundary-positive or not)
        from cauliflow.corpus import extract_pause_labels
        from cauliflow.metrics import fbeta
        posts, labels = [], []
        for utt in corpus.utterances:
            lab = extract_pause_labels(utt, 4)
            for w in range(utt.num_words):
                posts.append(posterior_pause_probability(
                    spec, corpus.word_features[(utt.id, w)]))
                labels.append(int(lab[w]))
        posts = np.array(posts)
        labels = np.array(labels)
        want = 0.0
        for theta_c in sorted(set(posts.tolist())) + [2.0]:
            pred = posts >= theta_c
            tp = int(np.sum(pred & (labels == 1)))
            fp = int(np.sum(pred & (labels == 0)))
            fn = int(np.sum(~pred & (labels == 1)))
            want = max(want, fbeta(tp, fp, fn, 0.25)[2])
        assert best == pytest.approx(want, abs=1e-12)

    def test_posterior_probability_in_unit_interval(self):
        spec = GeneratorSpec(seed=1)
        corpus = generate_corpus(spec, 20)
        for key, vec in list(corpus.word_features.items())[:200]:
            p = posterior_pause_probability(spec, vec)
            assert 0.0 <= p <= 1.0


class TestSpecSerialization:
    def test_json_round_trip(self):
        spec = GeneratorSpec(seed=9, punct_rate=0.05)
        again = GeneratorSpec.from_json(spec.to_json())
        assert again == spec
