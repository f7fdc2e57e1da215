"""Phoneme encoder, word-feature upsampling, speaker vectors, and the
rate-offset scalars."""

import numpy as np
import pytest

from cauliflow.conditioning import (PhonemeEncoder, assemble_conditioning,
                                    mean_speaker_embedding, pause_rate_offset,
                                    receptive_field_half_width, speech_rate_offset,
                                    upsample_word_features, PAUSE_RATE_CAP)
from cauliflow.corpus import CorpusStats, corpus_stats
from cauliflow.synthdata import GeneratorSpec, generate_corpus

from test_corpus import make_utterance


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(GeneratorSpec(seed=21), 30)


@pytest.fixture(scope="module")
def encoder(corpus):
    return PhonemeEncoder(corpus.inventory, dim=12, seed=0)


class TestEncoder:
    def test_one_vector_per_token(self, corpus, encoder):
        utt = corpus.utterances[0]
        ids = encoder.ids_for(utt.tokens)
        out = encoder.encode(ids, np.zeros(len(ids), dtype=bool))
        assert out.shape == (len(utt.tokens), 12)

    def test_deterministic(self, corpus, encoder):
        utt = corpus.utterances[0]
        ids = encoder.ids_for(utt.tokens)
        mask = np.zeros(len(ids), dtype=bool)
        a = encoder.encode(ids, mask).data
        b = encoder.encode(ids, mask).data
        np.testing.assert_array_equal(a, b)

    def test_unknown_symbol_rejected(self, corpus, encoder):
        from cauliflow.corpus import Token
        with pytest.raises(ValueError, match="unknown symbol"):
            encoder.ids_for([Token("ph", "zz99", 0, 1.0)])

    def test_receptive_field_bound(self, encoder):
        # permuting ids beyond the receptive field leaves the center
        # output unchanged; permuting inside changes it
        half = receptive_field_half_width()
        assert half >= 8  # spec: span of at least 15 tokens
        n = 2 * half + 31
        rng = np.random.default_rng(3)
        ids = rng.integers(0, 10, n)
        mask = np.zeros(n, dtype=bool)
        center = n // 2
        base = encoder.encode(ids, mask).data[center]

        far = ids.copy()
        far[center + half + 1:] = far[center + half + 1:][::-1]
        far[:center - half] = far[:center - half][::-1]
        np.testing.assert_array_equal(encoder.encode(far, mask).data[center], base)

        near = ids.copy()
        near[center + 1], near[center + 2] = near[center + 2], near[center + 1]
        if near[center + 1] != near[center + 2]:
            assert not np.array_equal(encoder.encode(near, mask).data[center], base)

    def test_padding_does_not_leak_into_valid_positions(self, corpus, encoder):
        utt = corpus.utterances[0]
        ids = encoder.ids_for(utt.tokens)
        n = len(ids)
        plain = encoder.encode(ids, np.zeros(n, dtype=bool)).data
        padded_ids = np.concatenate([ids, np.zeros(5, dtype=np.int64)])
        mask = np.zeros(n + 5, dtype=bool)
        mask[n:] = True
        padded = encoder.encode(padded_ids, mask).data
        np.testing.assert_array_equal(padded[:n], plain)
        assert np.all(padded[n:] == 0.0)


class TestWordFeatures:
    def test_word_vector_repeated_per_phoneme(self, corpus):
        utt = corpus.utterances[0]
        out = upsample_word_features(utt, corpus.word_features)
        assert out.shape == (len(utt.tokens), corpus.word_feature_dim)
        for i, tok in enumerate(utt.tokens):
            np.testing.assert_array_equal(out[i],
                                          corpus.word_features[(utt.id, tok.word_index)])

    def test_separator_takes_preceding_word(self, corpus):
        utt = corpus.utterances[0]
        out = upsample_word_features(utt, corpus.word_features)
        for w in range(utt.num_words):
            sep = utt.separator_after(w)
            if sep is not None:
                np.testing.assert_array_equal(out[sep],
                                              corpus.word_features[(utt.id, w)])

    def test_missing_vector_rejected(self, corpus):
        utt = corpus.utterances[0]
        with pytest.raises(KeyError):
            upsample_word_features(utt, {})


class TestSpeakerEmbedding:
    def test_single_vector_is_identity(self):
        table = {("s", "u1"): np.array([1.0, 2.0])}
        np.testing.assert_array_equal(mean_speaker_embedding("s", table), [1.0, 2.0])

    def test_opposite_vectors_cancel(self):
        table = {("s", "u1"): np.array([1.0, -3.0]), ("s", "u2"): np.array([-1.0, 3.0])}
        np.testing.assert_array_equal(mean_speaker_embedding("s", table), [0.0, 0.0])

    def test_unknown_speaker_rejected(self):
        with pytest.raises(KeyError):
            mean_speaker_embedding("nope", {})

    def test_mean_approaches_cluster_center(self, corpus):
        spec = GeneratorSpec(seed=21)
        from cauliflow.synthdata import speaker_center
        speaker = corpus.utterances[0].speaker
        mean = mean_speaker_embedding(speaker, corpus.speaker_vectors)
        center = speaker_center(spec, speaker)
        n = sum(1 for k in corpus.speaker_vectors if k[0] == speaker)
        tol = 4 * spec.speaker_vector_noise / np.sqrt(n)
        assert np.abs(mean - center).mean() < tol


class TestRateOffsets:
    def test_zero_at_training_mean(self):
        utt = make_utterance((0.0, 20.0))
        rate = utt.num_words / utt.duration_seconds
        stats = CorpusStats(rate, 2.0, 4.0)
        assert speech_rate_offset(utt, stats) == pytest.approx(0.0)
        assert pause_rate_offset(utt, stats) == pytest.approx(0.0)

    def test_direct_formula(self):
        # 10 words in 4 s with mean 2.0 -> +0.5
        stats = CorpusStats(2.0, 6.0, 4.0)
        utt = make_utterance((0.0, 20.0))
        w = utt.num_words
        assert speech_rate_offset(utt, stats) == pytest.approx(
            w / utt.duration_seconds - 2.0)

    def test_slower_speech_lowers_offset(self):
        from cauliflow.corpus import replace_durations
        utt = make_utterance((0.0, 20.0))
        slow = replace_durations(utt, utt.durations() * 2)
        stats = CorpusStats(2.0, 6.0, 4.0)
        assert speech_rate_offset(slow, stats) < speech_rate_offset(utt, stats)

    def test_pause_rate_examples(self):
        stats = CorpusStats(2.0, 6.0, 4.0)
        # 2 words, 1 pause -> 2/1 - 6 = -4
        utt = make_utterance((0.0, 20.0))
        assert pause_rate_offset(utt, stats) == pytest.approx(-4.0)
        # no pauses -> capped
        utt0 = make_utterance((0.0, 0.0))
        assert pause_rate_offset(utt0, stats) == PAUSE_RATE_CAP


class TestAssemble:
    def test_inference_defaults_to_zero_offsets(self, corpus, encoder):
        utt = corpus.utterances[0]
        bundle = assemble_conditioning(utt, encoder, corpus, training=False)
        assert bundle.speech_rate_offset == 0.0
        assert bundle.pause_rate_offset == 0.0

    def test_overrides_pass_through(self, corpus, encoder):
        utt = corpus.utterances[0]
        bundle = assemble_conditioning(utt, encoder, corpus, training=False,
                                       speech_rate=0.5, pause_rate=-1.5)
        assert bundle.speech_rate_offset == 0.5
        assert bundle.pause_rate_offset == -1.5

    def test_training_offsets_match_formulas(self, corpus, encoder):
        stats = corpus_stats(corpus.utterances)
        utt = corpus.utterances[3]
        bundle = assemble_conditioning(utt, encoder, corpus, stats, training=True)
        assert bundle.speech_rate_offset == pytest.approx(speech_rate_offset(utt, stats))
        assert bundle.pause_rate_offset == pytest.approx(pause_rate_offset(utt, stats))

    def test_padding_masks_all_lengths(self, corpus, encoder):
        utt = corpus.utterances[0]
        bundle = assemble_conditioning(utt, encoder, corpus, training=False, pad_to=4)
        n = len(utt.tokens)
        assert len(bundle.pad_mask) % 4 == 0
        assert bundle.n_valid == n
        assert bundle.ph.shape[0] == len(bundle.pad_mask)
        assert bundle.word.shape[0] == len(bundle.pad_mask)
