"""Synthetic duration corpus with a fully known conditional distribution.

Every sampled duration comes from a closed-form discrete distribution
whose parameters are visible in the trace, so tests can check each model
against exact conditional means, densities, and Bayes-optimal decisions
instead of eyeballing.

The generative process per utterance:
  * a speaker (fixed tempo multiplier) and an utterance tempo factor
    scale phoneme duration means -> recoverable speech-rate signal;
  * a pausing factor multiplies pause odds at every separator ->
    recoverable pause-rate signal;
  * each word carries a latent break suitability; the pause probability
    of its following separator is a logistic link in that latent, with a
    per-kind bias calibrated so mean pause rates hit the configured
    targets (word boundaries rarely pause, punctuation usually does);
  * words preceding a pause have all their phoneme durations lengthened,
    so pause knowledge also helps phoneme-duration prediction;
  * word feature vectors embed the suitability latent (noisy) and the
    punctuation flag (exact), standing in for contextual text embeddings.

Pause-mode separator durations start above the pause threshold and
no-pause durations stay below it, so the latent pause decision coincides
with the threshold-derived label.
"""

import json
from dataclasses import dataclass, asdict
from functools import lru_cache

import numpy as np

from . import rng
from .corpus import (BOUNDARY, PHONEME, PUNCTUATION, Corpus, Token, Utterance, Word)


@dataclass(frozen=True)
class GeneratorSpec:
    seed: int = 0
    num_phoneme_symbols: int = 24
    num_speakers: int = 4
    word_feature_dim: int = 16
    speaker_dim: int = 192
    words_per_utterance: tuple = (7, 17)
    phonemes_per_word: tuple = (2, 6)
    # phoneme duration process (frames)
    phoneme_mean_range: tuple = (4.0, 11.0)
    phoneme_sigma_range: tuple = (0.6, 1.0)
    max_phoneme_frames: int = 60
    prepause_lengthen: float = 2.5
    length_compression: float = 0.35     # phonemes shorten in longer words
    # rate variation
    speaker_tempo_spread: float = 0.10   # log-spread of per-speaker multipliers
    tempo_sigma: float = 0.10            # per-utterance lognormal tempo factor
    pausing_sigma: float = 0.70          # per-utterance lognormal pause-odds factor
    # separators
    punct_rate: float = 0.03             # P(non-final separator is punctuation)
    boundary_pause_rate: float = 0.025   # mean pause probability at word boundaries
    punct_pause_rate: float = 0.62       # mean pause probability at punctuation
    suitability_gain: float = 16.0        # logistic slope on the suitability latent
    punct_suitability_gain: float = 12.0  # steeper: punctuation pauses are near-deterministic
    pause_miss_rate: float = 0.12        # irreducible chance a would-be pause is skipped
    pause_mean: float = 40.0
    pause_sigma: float = 14.0
    pause_min: int = 6
    pause_max: int = 150
    nopause_decay: float = 1.3           # pmf on {0..3} proportional to exp(-d/decay)
    # observation model
    feature_noise: float = 0.03
    speaker_vector_noise: float = 0.3

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        for key in ("words_per_utterance", "phonemes_per_word",
                    "phoneme_mean_range", "phoneme_sigma_range"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


@dataclass(frozen=True)
class PhonemeContext:
    symbol: str
    rate: float          # speaker multiplier x utterance tempo
    lengthened: bool     # word is followed by a pause
    word_length: int     # phonemes in the containing word


@dataclass(frozen=True)
class SeparatorContext:
    kind: str
    suitability: float   # latent u of the preceding word
    pausing_factor: float
    paused: bool         # realized decision


@dataclass(frozen=True)
class UtteranceTrace:
    utterance_id: str
    speaker_multiplier: float
    tempo: float
    pausing_factor: float
    suitability: tuple           # one latent per word
    contexts: tuple              # one context per token


# -- closed-form pieces -----------------------------------------------------

# dense grid: the integrand can be nearly a step function (steep links),
# which defeats Gauss-Hermite quadrature
_SIG_NODES = np.linspace(-8.0, 8.0, 4001)
_SIG_WEIGHTS = np.exp(-0.5 * _SIG_NODES ** 2)
_SIG_WEIGHTS = _SIG_WEIGHTS / _SIG_WEIGHTS.sum()


def _mean_sigmoid(bias, scale):
    """E[sigmoid(bias + scale * X)] for X ~ N(0, 1), by quadrature."""
    z = np.clip(bias + scale * _SIG_NODES, -60.0, 60.0)
    return float(np.sum(_SIG_WEIGHTS / (1.0 + np.exp(-z))))


def link_gain(spec, kind):
    return spec.suitability_gain if kind == BOUNDARY else spec.punct_suitability_gain


@lru_cache(maxsize=None)
def link_bias(spec, kind):
    """Per-kind link bias solving for the configured mean pause rate."""
    target = spec.boundary_pause_rate if kind == BOUNDARY else spec.punct_pause_rate
    target = target / (1.0 - spec.pause_miss_rate)
    if target >= 1.0:
        raise ValueError("pause rate unreachable at this miss rate")
    scale = np.hypot(link_gain(spec, kind), spec.pausing_sigma)
    lo, hi = -60.0, 60.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if _mean_sigmoid(mid, scale) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def pause_probability(spec, kind, suitability, pausing_factor):
    z = (link_gain(spec, kind) * suitability + link_bias(spec, kind)
         + np.log(pausing_factor))
    z = min(max(z, -60.0), 60.0)
    return float((1.0 - spec.pause_miss_rate) / (1.0 + np.exp(-z)))


def _discrete_normal(lo, hi, mean, sigma):
    support = np.arange(lo, hi + 1)
    w = np.exp(-0.5 * ((support - mean) / sigma) ** 2)
    return support, w / w.sum()


def _nopause_pmf(spec):
    support = np.arange(0, 4)
    w = np.exp(-support / spec.nopause_decay)
    return support, w / w.sum()


@lru_cache(maxsize=None)
def symbol_table(spec):
    """Per-symbol base duration mean and sigma, drawn once from the seed."""
    gen = rng.derive(spec.seed, "symbols")
    means = gen.uniform(*spec.phoneme_mean_range, size=spec.num_phoneme_symbols)
    sigmas = gen.uniform(*spec.phoneme_sigma_range, size=spec.num_phoneme_symbols)
    return {f"p{i:02d}": (float(means[i]), float(sigmas[i]))
            for i in range(spec.num_phoneme_symbols)}


@lru_cache(maxsize=None)
def speaker_multipliers(spec):
    if spec.num_speakers == 1:
        logs = np.zeros(1)
    else:
        logs = np.linspace(-spec.speaker_tempo_spread, spec.speaker_tempo_spread,
                           spec.num_speakers)
    return {f"spk{i}": float(np.exp(logs[i])) for i in range(spec.num_speakers)}


BOUNDARY_SYMBOL = "<wb>"


def inventory_for(spec):
    return [f"p{i:02d}" for i in range(spec.num_phoneme_symbols)] + [BOUNDARY_SYMBOL, ",", "."]


def word_length_multiplier(spec, word_length):
    """Polysyllabic shortening: phoneme means shrink in longer words."""
    mean_len = 0.5 * (spec.phonemes_per_word[0] + spec.phonemes_per_word[1])
    return (mean_len / word_length) ** spec.length_compression


def oracle_conditional(spec, ctx):
    """Exact pmf of a token's duration given its generation context.

    Returns (support, pmf). For separators this is the pause mixture with
    the mixture weight given by the link, not the realized decision.
    """
    if isinstance(ctx, PhonemeContext):
        base_mean, sigma = symbol_table(spec)[ctx.symbol]
        mean = base_mean * ctx.rate * word_length_multiplier(spec, ctx.word_length)
        if ctx.lengthened:
            mean *= spec.prepause_lengthen
        return _discrete_normal(1, spec.max_phoneme_frames, mean, sigma)
    if isinstance(ctx, SeparatorContext):
        p = pause_probability(spec, ctx.kind, ctx.suitability, ctx.pausing_factor)
        ps, pw = _discrete_normal(spec.pause_min, spec.pause_max, spec.pause_mean, spec.pause_sigma)
        ns, nw = _nopause_pmf(spec)
        support = np.arange(0, spec.pause_max + 1)
        pmf = np.zeros(len(support))
        pmf[ps] += p * pw
        pmf[ns] += (1.0 - p) * nw
        return support, pmf
    raise ValueError(f"context outside generator spec: {ctx!r}")


def oracle_mean(spec, ctx):
    support, pmf = oracle_conditional(spec, ctx)
    return float(np.sum(support * pmf))


# -- generation -------------------------------------------------------------


def _draw(gen, support, pmf):
    return int(gen.choice(support, p=pmf))


def _generate_utterance(spec, index):
    gen = rng.derive(spec.seed, "utt", index)
    utt_id = f"u{index:05d}"
    speakers = sorted(speaker_multipliers(spec))
    speaker = speakers[int(gen.integers(0, len(speakers)))]
    spk_mult = speaker_multipliers(spec)[speaker]
    tempo = float(np.exp(gen.normal(0.0, spec.tempo_sigma)))
    pausing = float(np.exp(gen.normal(0.0, spec.pausing_sigma)))
    rate = spk_mult * tempo

    n_words = int(gen.integers(spec.words_per_utterance[0], spec.words_per_utterance[1] + 1))
    word_lengths = [int(gen.integers(spec.phonemes_per_word[0], spec.phonemes_per_word[1] + 1))
                    for _ in range(n_words)]
    suitability = gen.normal(0.0, 1.0, size=n_words)

    # separator kinds and pause decisions, then durations (pre-pausal
    # lengthening needs the decisions first)
    sep_kinds = []
    for w in range(n_words):
        if w == n_words - 1:
            sep_kinds.append(PUNCTUATION)
        else:
            sep_kinds.append(PUNCTUATION if gen.uniform() < spec.punct_rate else BOUNDARY)
    paused = []
    for w in range(n_words):
        p = pause_probability(spec, sep_kinds[w], suitability[w], pausing)
        paused.append(bool(gen.uniform() < p))

    table = symbol_table(spec)
    symbols = sorted(table)
    tokens = []
    words = []
    contexts = []
    for w in range(n_words):
        start = len(tokens)
        for _ in range(word_lengths[w]):
            sym = symbols[int(gen.integers(0, len(symbols)))]
            ctx = PhonemeContext(symbol=sym, rate=rate, lengthened=paused[w],
                                 word_length=word_lengths[w])
            support, pmf = oracle_conditional(spec, ctx)
            tokens.append(Token(PHONEME, sym, w, float(_draw(gen, support, pmf))))
            contexts.append(ctx)
        words.append(Word(f"{utt_id}_w{w}", start, len(tokens)))
        kind = sep_kinds[w]
        ctx = SeparatorContext(kind=kind, suitability=float(suitability[w]),
                               pausing_factor=pausing, paused=paused[w])
        if paused[w]:
            support, pmf = _discrete_normal(spec.pause_min, spec.pause_max,
                                            spec.pause_mean, spec.pause_sigma)
        else:
            support, pmf = _nopause_pmf(spec)
        symbol = BOUNDARY_SYMBOL if kind == BOUNDARY else ("." if w == n_words - 1 else ",")
        tokens.append(Token(kind, symbol, w, float(_draw(gen, support, pmf))))
        contexts.append(ctx)

    utt = Utterance(utt_id, speaker, tuple(words), tuple(tokens))

    # observed features: noisy suitability + exact punctuation flag + noise dims
    features = {}
    for w in range(n_words):
        vec = gen.normal(0.0, 1.0, size=spec.word_feature_dim)
        vec[0] = suitability[w] + spec.feature_noise * gen.normal()
        vec[1] = (1.0 if sep_kinds[w] == PUNCTUATION else 0.0)
        features[(utt_id, w)] = vec

    trace = UtteranceTrace(utt_id, spk_mult, tempo, pausing,
                           tuple(float(s) for s in suitability), tuple(contexts))
    return utt, features, trace


def speaker_center(spec, speaker):
    return rng.derive(spec.seed, "spkcenter", speaker).normal(0.0, 1.0, size=spec.speaker_dim)


def generate_corpus(spec, n_utterances, id_offset=0, with_trace=False):
    """Generate a validated corpus of ``n_utterances``.

    Deterministic per (spec, id_offset): utterance i uses its own derived
    stream, so corpora over disjoint index ranges are independent.
    """
    utterances = []
    word_features = {}
    speaker_vectors = {}
    traces = []
    for i in range(id_offset, id_offset + n_utterances):
        utt, feats, trace = _generate_utterance(spec, i)
        utterances.append(utt)
        word_features.update(feats)
        traces.append(trace)
        gen = rng.derive(spec.seed, "spkvec", i)
        center = speaker_center(spec, utt.speaker)
        speaker_vectors[(utt.speaker, utt.id)] = center + spec.speaker_vector_noise * gen.normal(
            0.0, 1.0, size=spec.speaker_dim)
    corpus = Corpus(utterances, inventory_for(spec), word_features, speaker_vectors,
                    spec.word_feature_dim, spec.speaker_dim)
    if with_trace:
        return corpus, traces
    return corpus


def generate_splits(spec, sizes=(2000, 200, 200), with_trace=False):
    """Train/dev/test corpora over disjoint utterance-index ranges."""
    out = []
    offset = 0
    for n in sizes:
        out.append(generate_corpus(spec, n, id_offset=offset, with_trace=with_trace))
        offset += n
    return tuple(out)


# -- analytic corpus-level expectations --------------------------------------


@lru_cache(maxsize=4096)
def _phoneme_token_moments(spec, multiplier):
    """Exact (mean, variance) of one phoneme-token duration, symbol marginal."""
    table = symbol_table(spec)
    m1 = m2 = 0.0
    for mean, sigma in table.values():
        support, pmf = _discrete_normal(1, spec.max_phoneme_frames, mean * multiplier, sigma)
        m1 += np.sum(support * pmf)
        m2 += np.sum(support.astype(float) ** 2 * pmf)
    m1 /= len(table)
    m2 /= len(table)
    return m1, m2 - m1 * m1


def _mixture_moments(parts):
    """(mean, var) of a finite mixture given [(weight, mean, var), ...]."""
    mean = sum(w * m for w, m, _ in parts)
    var = sum(w * (v + (m - mean) ** 2) for w, m, v in parts)
    return mean, var


def expected_words_per_second(spec):
    """Mean words/second implied by the spec.

    Computes E[W / D] over a quadrature grid of (word count, speaker,
    tempo, pausing factor) using exact discrete token moments, with a
    second-order correction for the remaining within-utterance duration
    variance: E[W/D] ~ (W/E[D]) * (1 + Var(D)/E[D]^2).
    """
    from .corpus import FRAME_SECONDS

    lo_len, hi_len = spec.phonemes_per_word
    lengths = list(range(lo_len, hi_len + 1))
    ns, nw = _nopause_pmf(spec)
    nopause_mean = float(np.sum(ns * nw))
    nopause_var = float(np.sum(ns.astype(float) ** 2 * nw)) - nopause_mean ** 2
    ps, pw = _discrete_normal(spec.pause_min, spec.pause_max, spec.pause_mean, spec.pause_sigma)
    pause_mean = float(np.sum(ps * pw))
    pause_var = float(np.sum(ps.astype(float) ** 2 * pw)) - pause_mean ** 2

    nodes, node_w = np.polynomial.hermite_e.hermegauss(15)
    node_w = node_w / node_w.sum()
    mults = list(speaker_multipliers(spec).values())
    w_lo, w_hi = spec.words_per_utterance

    def word_moments(rate, p_pause):
        # mixture over (length, lengthened?) with exact token moments
        branches = []
        for length in lengths:
            base = rate * word_length_multiplier(spec, length)
            for weight, mult in ((p_pause, base * spec.prepause_lengthen),
                                 (1.0 - p_pause, base)):
                mt, vt = _phoneme_token_moments(spec, mult)
                branches.append((weight / len(lengths), length * mt, length * vt))
        return _mixture_moments(branches)

    def separator_moments(p_pause):
        return _mixture_moments([(p_pause, pause_mean, pause_var),
                                 (1.0 - p_pause, nopause_mean, nopause_var)])

    def word_sep_covariance(rate, p_pause):
        # one Bernoulli drives both pre-pausal lengthening and the pause
        # mode of the following separator, coupling their durations
        delta_word = 0.0
        for length in lengths:
            base = rate * word_length_multiplier(spec, length)
            mt_long, _ = _phoneme_token_moments(spec, base * spec.prepause_lengthen)
            mt_plain, _ = _phoneme_token_moments(spec, base)
            delta_word += length * (mt_long - mt_plain) / len(lengths)
        return p_pause * (1.0 - p_pause) * delta_word * (pause_mean - nopause_mean)

    total = 0.0
    weight_sum = 0.0
    for n_words in range(w_lo, w_hi + 1):
        for m in mults:
            for t_node, t_w in zip(np.exp(spec.tempo_sigma * nodes), node_w):
                for p_node, p_w in zip(np.exp(spec.pausing_sigma * nodes), node_w):
                    rate = m * t_node
                    keep = 1.0 - spec.pause_miss_rate
                    p_b = keep * _mean_sigmoid(link_bias(spec, BOUNDARY) + np.log(p_node),
                                               link_gain(spec, BOUNDARY))
                    p_p = keep * _mean_sigmoid(link_bias(spec, PUNCTUATION) + np.log(p_node),
                                               link_gain(spec, PUNCTUATION))
                    p_mid = (1.0 - spec.punct_rate) * p_b + spec.punct_rate * p_p
                    wm_mid, wv_mid = word_moments(rate, p_mid)
                    wm_fin, wv_fin = word_moments(rate, p_p)
                    sm_mid, sv_mid = _mixture_moments(
                        [(1.0 - spec.punct_rate, *separator_moments(p_b)),
                         (spec.punct_rate, *separator_moments(p_p))])
                    sm_fin, sv_fin = separator_moments(p_p)
                    cov_mid = ((1.0 - spec.punct_rate) * word_sep_covariance(rate, p_b)
                               + spec.punct_rate * word_sep_covariance(rate, p_p))
                    cov_fin = word_sep_covariance(rate, p_p)
                    mean_d = ((n_words - 1) * (wm_mid + sm_mid) + wm_fin + sm_fin)
                    var_d = ((n_words - 1) * (wv_mid + sv_mid + 2.0 * cov_mid)
                             + wv_fin + sv_fin + 2.0 * cov_fin)
                    rate_node = (n_words / (mean_d * FRAME_SECONDS)) * (1.0 + var_d / mean_d ** 2)
                    w = t_w * p_w
                    total += w * rate_node
                    weight_sum += w
    return total / weight_sum


def posterior_pause_probability(spec, feature_vector):
    """Bayes posterior P(pause | word feature vector).

    Uses the exact observation model: feature[0] = u + noise with u ~
    N(0,1), feature[1] the punctuation flag; marginalizes the unseen
    pausing factor by quadrature.
    """
    obs = float(feature_vector[0])
    kind = PUNCTUATION if feature_vector[1] > 0.5 else BOUNDARY
    noise_var = spec.feature_noise ** 2
    post_mean = obs / (1.0 + noise_var)
    post_var = noise_var / (1.0 + noise_var)
    gain = link_gain(spec, kind)
    bias = gain * post_mean + link_bias(spec, kind)
    scale = np.sqrt(gain ** 2 * post_var + spec.pausing_sigma ** 2)
    return (1.0 - spec.pause_miss_rate) * _mean_sigmoid(bias, scale)


def oracle_best_fbeta(spec, corpus, beta=0.25, pause_threshold=None):
    """Best F_beta achievable by thresholding the true pause posterior.

    Exhaustive search over all distinct posterior values on the given
    split; upper-bounds (in expectation) what any trained classifier that
    sees only the word features can reach.
    """
    from .corpus import DEFAULT_PAUSE_THRESHOLD, extract_pause_labels
    from .metrics import fbeta

    threshold = DEFAULT_PAUSE_THRESHOLD if pause_threshold is None else pause_threshold
    posts = []
    labels = []
    for utt in corpus.utterances:
        lab = extract_pause_labels(utt, threshold)
        for w in range(utt.num_words):
            posts.append(posterior_pause_probability(spec, corpus.word_features[(utt.id, w)]))
            labels.append(int(lab[w]))
    posts = np.array(posts)
    labels = np.array(labels)
    best = 0.0
    best_theta = 1.0
    for theta in sorted(set(posts.tolist())) + [1.1]:
        pred = posts >= theta
        tp = int(np.sum(pred & (labels == 1)))
        fp = int(np.sum(pred & (labels == 0)))
        fn = int(np.sum(~pred & (labels == 1)))
        _, _, f = fbeta(tp, fp, fn, beta)
        if f > best:
            best = f
            best_theta = theta
    return best, best_theta
