"""Per-token conditioning: phoneme encoding, word features, speaker
vectors, and the two rate-control scalars.

The phoneme encoder is a dilated convolution stack (3 plain convolutions
then 4 residual dilated ones) — receptive field 21 tokens per side, no
recurrence. Word feature vectors are upsampled so every token carries
its word's vector; separators take the preceding word's. The rate
scalars are affine deviations from training-split means: 0 means average
pace / average pausing, positive speech-rate offset means faster speech,
positive pause-rate offset means more words per pause (fewer pauses).
"""

from dataclasses import dataclass

import numpy as np

from . import rng
from .corpus import FRAME_SECONDS, count_pauses
from .layers import Conv1d, collect_params, mask_rows
from .tensor import Tensor, embedding, tanh

PAUSE_RATE_CAP = 10.0  # pause-rate offset assigned to pause-free utterances

_FRONT_CONVS = 3
_FRONT_WIDTH = 5
_DILATIONS = (1, 2, 4, 8)
_DILATED_WIDTH = 3


def receptive_field_half_width():
    """Tokens per side a single output position can depend on."""
    return _FRONT_CONVS * (_FRONT_WIDTH // 2) + sum(d * (_DILATED_WIDTH // 2) for d in _DILATIONS)


class PhonemeEncoder:
    """Symbol embedding plus conv stack; one vector per input token.

    Padding positions are zeroed after every layer, so outputs at valid
    positions are unchanged by appending padding (convolutions see zeros
    either way).
    """

    def __init__(self, inventory, dim, seed, extra_channels=0):
        self.inventory = list(inventory)
        self.symbol_ids = {s: i for i, s in enumerate(self.inventory)}
        self.dim = dim
        self.extra_channels = extra_channels
        gen = rng.derive(seed, "encoder")
        self.embed = Tensor(gen.normal(0.0, 0.5, (len(self.inventory), dim)), requires_grad=True)
        in_ch = dim + extra_channels
        self.front = []
        for i in range(_FRONT_CONVS):
            self.front.append(Conv1d(gen, _FRONT_WIDTH, in_ch if i == 0 else dim, dim))
        self.dilated = [Conv1d(gen, _DILATED_WIDTH, dim, dim, dilation=d) for d in _DILATIONS]

    def ids_for(self, tokens):
        try:
            return np.array([self.symbol_ids[t.symbol] for t in tokens], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"unknown symbol {exc.args[0]!r}") from exc

    def encode(self, symbol_ids, pad_mask, extra=None):
        """symbol_ids (P,) ints, pad_mask (P,) bool, extra optional (P, k)."""
        h = embedding(self.embed, symbol_ids)
        if extra is not None:
            from .tensor import concat
            h = concat([h, extra], axis=1)
        h = mask_rows(h, pad_mask)
        for conv in self.front:
            h = mask_rows(tanh(conv(h)), pad_mask)
        for conv in self.dilated:
            h = h + mask_rows(tanh(conv(h)), pad_mask)
        return mask_rows(h, pad_mask) if pad_mask.any() else h

    def params(self, prefix="encoder"):
        parts = [(f"{prefix}.embed", self.embed)]
        parts += [(f"{prefix}.front{i}", c) for i, c in enumerate(self.front)]
        parts += [(f"{prefix}.dilated{i}", c) for i, c in enumerate(self.dilated)]
        return collect_params(parts)


@dataclass
class ConditioningBundle:
    """Everything the flow conditions on, aligned per token (padded to P)."""

    ph: Tensor                 # (P, E) encoder outputs
    word: np.ndarray           # (P, D_w) upsampled word features
    speaker: np.ndarray        # (D_s,) utterance or mean speaker vector
    speech_rate_offset: float
    pause_rate_offset: float
    pad_mask: np.ndarray       # (P,) True at padding positions

    @property
    def n_valid(self):
        return int((~self.pad_mask).sum())


def upsample_word_features(utt, word_features):
    """(P, D_w): each token takes its word's vector (separators: preceding word)."""
    rows = []
    for t in utt.tokens:
        key = (utt.id, t.word_index)
        if key not in word_features:
            raise KeyError(f"{utt.id}: no word feature vector for word {t.word_index}")
        rows.append(word_features[key])
    return np.stack(rows)


def mean_speaker_embedding(speaker_id, speaker_vectors):
    """Arithmetic mean of a speaker's per-utterance vectors (inference)."""
    keys = sorted(k for k in speaker_vectors if k[0] == speaker_id)
    if not keys:
        raise KeyError(f"unknown speaker {speaker_id!r}")
    return np.mean([speaker_vectors[k] for k in keys], axis=0)


def speech_rate_offset(utt, stats):
    """Words per second minus the training mean."""
    seconds = utt.duration_seconds
    if seconds <= 0:
        raise ValueError(f"{utt.id}: zero duration")
    return utt.num_words / seconds - stats.words_per_second_mean


def pause_rate_offset(utt, stats, cap=PAUSE_RATE_CAP):
    """Words per pause minus the training mean; capped for pause-free input."""
    pauses = count_pauses(utt, stats.pause_threshold)
    if pauses == 0:
        return cap
    return utt.num_words / pauses - stats.words_per_pause_mean


def pad_length(n, multiple):
    return ((n + multiple - 1) // multiple) * multiple


@dataclass
class PreparedUtterance:
    """Constant per-utterance inputs, computed once; only the encoder
    forward has to rerun while its weights train."""

    utt_id: str
    symbol_ids: np.ndarray
    pad_mask: np.ndarray
    word: np.ndarray
    speaker: np.ndarray
    speech_rate: float
    pause_rate: float
    durations: np.ndarray
    kinds: tuple


def prepare_utterance(utt, encoder, corpus, stats=None, pad_to=1, training=True,
                      speech_rate=None, pause_rate=None, mean_speaker=None):
    """Gather the constant conditioning inputs for one utterance.

    Training uses the utterance's own speaker vector and ground-truth
    rate offsets. At inference the mean speaker embedding is used and the
    offsets come from the overrides (0 = average behaviour).

    Padding goes at the FRONT: the utterance-final tokens (trailing
    punctuation, the most pause-critical positions) then always land in a
    fully valid frame after grouping.
    """
    n = len(utt.tokens)
    total = pad_length(n, pad_to)
    lead = total - n
    pad_mask = np.zeros(total, dtype=bool)
    pad_mask[:lead] = True
    ids = np.zeros(total, dtype=np.int64)
    ids[lead:] = encoder.ids_for(utt.tokens)
    word = np.zeros((total, corpus.word_feature_dim))
    word[lead:] = upsample_word_features(utt, corpus.word_features)

    if training:
        key = (utt.speaker, utt.id)
        if key not in corpus.speaker_vectors:
            raise KeyError(f"{utt.id}: no speaker vector for training")
        speaker = corpus.speaker_vectors[key]
        sr = speech_rate_offset(utt, stats) if speech_rate is None else speech_rate
        pr = pause_rate_offset(utt, stats) if pause_rate is None else pause_rate
    else:
        speaker = mean_speaker if mean_speaker is not None else mean_speaker_embedding(
            utt.speaker, corpus.speaker_vectors)
        sr = 0.0 if speech_rate is None else float(speech_rate)
        pr = 0.0 if pause_rate is None else float(pause_rate)

    return PreparedUtterance(utt.id, ids, pad_mask, word,
                             np.asarray(speaker, dtype=np.float64), float(sr), float(pr),
                             utt.durations(), tuple(t.kind for t in utt.tokens))


def bundle_from_prepared(prep, encoder):
    """Run the encoder and assemble the full conditioning bundle."""
    ph = encoder.encode(prep.symbol_ids, prep.pad_mask)
    return ConditioningBundle(ph=ph, word=prep.word, speaker=prep.speaker,
                              speech_rate_offset=prep.speech_rate,
                              pause_rate_offset=prep.pause_rate,
                              pad_mask=prep.pad_mask)


def assemble_conditioning(utt, encoder, corpus, stats=None, pad_to=1, training=True,
                          speech_rate=None, pause_rate=None, mean_speaker=None):
    """One-call bundle construction (prepare + encode)."""
    prep = prepare_utterance(utt, encoder, corpus, stats, pad_to, training,
                             speech_rate, pause_rate, mean_speaker)
    return bundle_from_prepared(prep, encoder)
