"""Metric definitions against brute-force oracles and known fixtures."""

import math

import numpy as np
import pytest

from cauliflow.corpus import PUNCTUATION, replace_durations
from cauliflow.metrics import (duration_histogram, evaluate_durations, fbeta,
                               jsd, jsd_histograms, pause_events, pause_rate,
                               percentile_l1, speech_rate)
from cauliflow.synthdata import GeneratorSpec, generate_corpus

from test_corpus import make_utterance


class TestFBeta:
    def test_perfect(self):
        assert fbeta(5, 0, 0) == (1.0, 1.0, 1.0)

    def test_no_true_positives(self):
        assert fbeta(0, 3, 2) == (0.0, 0.0, 0.0)

    def test_half_precision_full_recall(self):
        # P=0.5, R=1.0, beta=0.25: F = 1.0625*0.5 / (0.0625*0.5 + 1.0)
        p, r, f = fbeta(2, 2, 0, 0.25)
        assert (p, r) == (0.5, 1.0)
        assert f == pytest.approx(0.5151515151515151, abs=1e-12)

    def test_oracle_equivalence_1000_random(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            tp, fp, fn = (int(v) for v in rng.integers(0, 50, 3))
            beta = float(rng.uniform(0.05, 3.0))
            p, r, f = fbeta(tp, fp, fn, beta)
            ep = tp / (tp + fp) if tp + fp else 0.0
            er = tp / (tp + fn) if tp + fn else 0.0
            denom = beta * beta * ep + er
            ef = (1 + beta * beta) * ep * er / denom if denom > 0 else 0.0
            assert abs(p - ep) < 1e-12 and abs(r - er) < 1e-12 and abs(f - ef) < 1e-12

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            fbeta(-1, 0, 0)


class TestJSD:
    def test_identical_histograms_zero(self):
        h = np.array([1.0, 2.0, 3.0, 0.0])
        assert jsd_histograms(h, h) == 0.0

    def test_disjoint_supports_ln2(self):
        a = np.array([1.0, 1.0, 0.0, 0.0])
        b = np.array([0.0, 0.0, 1.0, 1.0])
        assert jsd_histograms(a, b) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            a = rng.integers(0, 10, 20).astype(float)
            b = rng.integers(0, 10, 20).astype(float)
            if a.sum() == 0 or b.sum() == 0:
                continue
            d1 = jsd_histograms(a, b)
            d2 = jsd_histograms(b, a)
            assert d1 == d2
            assert 0.0 <= d1 <= math.log(2.0) + 1e-15

    def test_gaussian_fixtures_match_direct_summation(self):
        # two discretized Gaussian histograms; independent plain-python sum
        xs = np.arange(0, 202)
        p = np.exp(-0.5 * ((xs - 40.0) / 8.0) ** 2)
        q = np.exp(-0.5 * ((xs - 50.0) / 12.0) ** 2)
        got = jsd_histograms(p, q)
        pn = p / p.sum()
        qn = q / q.sum()
        want = 0.0
        for i in range(len(xs)):
            m = 0.5 * (pn[i] + qn[i])
            if pn[i] > 0:
                want += 0.5 * pn[i] * math.log(pn[i] / m)
            if qn[i] > 0:
                want += 0.5 * qn[i] * math.log(qn[i] / m)
        assert got == pytest.approx(want, abs=1e-12)

    def test_histogram_overflow_bin(self):
        h = duration_histogram([0, 1, 200, 201, 500])
        assert h[0] == 1 and h[1] == 1 and h[200] == 1 and h[201] == 2

    def test_empty_filter_rejected(self):
        utt = make_utterance()
        with pytest.raises(ValueError):
            jsd([utt], [utt], "bogus")


class TestPauseEvents:
    def test_all_zero_boundaries_empty(self):
        punct, bound = pause_events(make_utterance((0.0, 0.0)))
        assert punct == set() and bound == set()

    def test_partition_by_kind(self):
        punct, bound = pause_events(make_utterance((10.0, 20.0)))
        assert punct == {5} and bound == {2}
        assert punct.isdisjoint(bound)


class TestRates:
    def test_pause_rate_single_utterance(self):
        # 2 words, 1 pause
        assert pause_rate([make_utterance((0.0, 20.0))]) == 2.0

    def test_speech_rate_halving_durations_doubles(self):
        utt = make_utterance((0.0, 20.0))
        fast = replace_durations(utt, utt.durations() / 2.0)
        assert speech_rate([fast]) == pytest.approx(2 * speech_rate([utt]))

    def test_no_pauses_rejected(self):
        with pytest.raises(ValueError):
            pause_rate([make_utterance((0.0, 0.0))])

    def test_order_invariance_exact(self):
        corpus = generate_corpus(GeneratorSpec(seed=12), 30)
        utts = corpus.utterances
        rng = np.random.default_rng(0)
        shuffled = [utts[i] for i in rng.permutation(len(utts))]
        assert speech_rate(utts) == speech_rate(shuffled)
        assert pause_rate(utts) == pause_rate(shuffled)


class TestPercentile:
    def test_zero_when_equal(self):
        x = np.arange(10.0)
        for q in (1, 50, 99, 100):
            assert percentile_l1(x, x, q) == 0.0

    def test_uniform_errors_99th(self):
        pred = np.arange(100.0)
        target = np.zeros(100)
        assert percentile_l1(pred, target, 99.0) == 99.0

    def test_monotone_in_q(self):
        rng = np.random.default_rng(9)
        pred = rng.integers(0, 50, 200).astype(float)
        targ = rng.integers(0, 50, 200).astype(float)
        vals = [percentile_l1(pred, targ, q) for q in (10, 25, 50, 75, 90, 99, 100)]
        assert vals == sorted(vals)

    def test_sort_based_oracle_1000_random(self):
        rng = np.random.default_rng(17)
        for _ in range(1000):
            n = int(rng.integers(1, 60))
            pred = rng.integers(0, 40, n).astype(float)
            targ = rng.integers(0, 40, n).astype(float)
            q = float(rng.uniform(0.5, 100.0))
            got = percentile_l1(pred, targ, q)
            errs = sorted(abs(a - b) for a, b in zip(pred, targ))
            want = errs[math.ceil((n - 1) * q / 100.0)]
            assert got == want

    def test_bad_q_rejected(self):
        with pytest.raises(ValueError):
            percentile_l1(np.ones(3), np.ones(3), 0.0)


class TestEvaluate:
    @pytest.fixture(scope="class")
    def corpus(self):
        return generate_corpus(GeneratorSpec(seed=13), 40)

    def test_self_comparison_is_perfect(self, corpus):
        report = evaluate_durations(corpus.utterances, corpus.utterances)
        assert report.jsd_pause == 0.0
        assert report.jsd_nonpause == 0.0
        assert report.punct_fbeta == 100.0
        assert report.boundary_fbeta in (100.0, 0.0)  # 0 only if no boundary pauses
        assert report.percentile_l1 == 0.0

    def test_permutation_invariant(self, corpus):
        utts = corpus.utterances
        rng = np.random.default_rng(1)
        perm = list(rng.permutation(len(utts)))
        report1 = evaluate_durations(utts, utts)
        report2 = evaluate_durations([utts[i] for i in perm], [utts[i] for i in perm])
        assert report1.to_dict() == report2.to_dict()

    def test_fbeta_bounds_hold(self, corpus):
        rng = np.random.default_rng(2)
        noisy = [replace_durations(u, np.maximum(0, np.round(
            u.durations() + rng.normal(0, 6, len(u.tokens))))) for u in corpus.utterances]
        r = evaluate_durations(noisy, corpus.utterances)
        for v in (r.punct_precision, r.punct_recall, r.punct_fbeta,
                  r.boundary_precision, r.boundary_recall, r.boundary_fbeta):
            assert 0.0 <= v <= 100.0
        assert 0.0 <= r.jsd_pause <= math.log(2.0)

    def test_misaligned_corpora_rejected(self, corpus):
        with pytest.raises(ValueError):
            evaluate_durations(corpus.utterances[:3], corpus.utterances[:2])
