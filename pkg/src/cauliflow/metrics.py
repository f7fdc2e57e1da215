"""Objective evaluation of predicted durations against targets.

All pause metrics use the same definition as the corpus module: a
separator token (word boundary or punctuation) whose duration reaches
the pause threshold. Precision/recall match predicted against target
pauses at exact token positions, split by separator kind. Duration
distributions are compared with Jensen-Shannon divergence (natural log,
so the upper bound is ln 2) over unit-frame histograms on [0, 200] plus
an overflow bin.

Aggregations over utterances sort their addends first, so every metric
is exactly invariant to utterance order.
"""

import math
from dataclasses import dataclass, fields

import numpy as np

from . import rng
from .corpus import (FRAME_SECONDS, DEFAULT_PAUSE_THRESHOLD, PHONEME, PUNCTUATION,
                     is_separator, replace_durations)

HISTOGRAM_MAX_FRAMES = 200


def fbeta(tp, fp, fn, beta=0.25):
    """(precision, recall, F_beta) as fractions; zero denominators give 0."""
    if min(tp, fp, fn) < 0:
        raise ValueError("fbeta: counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    b2 = beta * beta
    denom = b2 * precision + recall
    f = (1.0 + b2) * precision * recall / denom if denom > 0 else 0.0
    return precision, recall, f


def pause_events(utt, pause_threshold=DEFAULT_PAUSE_THRESHOLD):
    """Token indices of pauses, split into (punctuation, word-boundary) sets."""
    punct = set()
    boundary = set()
    for i, tok in enumerate(utt.tokens):
        if is_separator(tok.kind) and tok.duration >= pause_threshold:
            (punct if tok.kind == PUNCTUATION else boundary).add(i)
    return punct, boundary


def _pause_counts(predicted, target, pause_threshold):
    """TP/FP/FN per category over aligned utterance pairs."""
    counts = {PUNCTUATION: [0, 0, 0], "boundary": [0, 0, 0]}
    for pred, targ in zip(predicted, target):
        if len(pred.tokens) != len(targ.tokens):
            raise ValueError(f"{targ.id}: predicted/target token counts differ")
        p_punct, p_bound = pause_events(pred, pause_threshold)
        t_punct, t_bound = pause_events(targ, pause_threshold)
        for key, p_set, t_set in ((PUNCTUATION, p_punct, t_punct),
                                  ("boundary", p_bound, t_bound)):
            counts[key][0] += len(p_set & t_set)
            counts[key][1] += len(p_set - t_set)
            counts[key][2] += len(t_set - p_set)
    return counts


def duration_histogram(durations):
    """Integer-frame counts over [0, 200] plus one overflow bin."""
    durations = np.asarray(durations)
    clipped = np.minimum(np.round(durations).astype(np.int64), HISTOGRAM_MAX_FRAMES + 1)
    if np.any(clipped < 0):
        raise ValueError("duration_histogram: negative duration")
    return np.bincount(clipped, minlength=HISTOGRAM_MAX_FRAMES + 2).astype(np.float64)


def jsd_histograms(p_counts, q_counts):
    """Jensen-Shannon divergence between two count vectors (natural log)."""
    p = np.asarray(p_counts, dtype=np.float64)
    q = np.asarray(q_counts, dtype=np.float64)
    if p.sum() <= 0 or q.sum() <= 0:
        raise ValueError("jsd: empty histogram")
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(a, b):
        sel = a > 0
        return float(np.sum(a[sel] * np.log(a[sel] / b[sel])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def _filtered_durations(utterances, keep_phonemes):
    vals = []
    for utt in utterances:
        for tok in utt.tokens:
            if (tok.kind == PHONEME) == keep_phonemes:
                vals.append(tok.duration)
    return vals


def jsd(predicted, target, token_filter):
    """JSD between predicted and target duration histograms.

    token_filter: "pause" compares separator tokens (the pause-capable
    positions); "nonpause" compares phoneme tokens.
    """
    if token_filter not in ("pause", "nonpause"):
        raise ValueError(f"unknown token filter {token_filter!r}")
    keep_ph = token_filter == "nonpause"
    p = _filtered_durations(predicted, keep_ph)
    q = _filtered_durations(target, keep_ph)
    if not p or not q:
        raise ValueError(f"jsd: no tokens match filter {token_filter!r}")
    return jsd_histograms(duration_histogram(p), duration_histogram(q))


def pause_rate(utterances, pause_threshold=DEFAULT_PAUSE_THRESHOLD):
    """Mean words-per-pause over utterances with at least one pause."""
    from .corpus import count_pauses

    ratios = []
    for utt in utterances:
        pauses = count_pauses(utt, pause_threshold)
        if pauses >= 1:
            ratios.append(utt.num_words / pauses)
    if not ratios:
        raise ValueError("pause_rate: no pauses in any utterance")
    return float(np.mean(np.sort(ratios)))


def speech_rate(utterances):
    """Mean words-per-second over utterances."""
    ratios = []
    for utt in utterances:
        seconds = utt.duration_seconds
        if seconds <= 0:
            raise ValueError(f"{utt.id}: zero duration")
        ratios.append(utt.num_words / seconds)
    if not ratios:
        raise ValueError("speech_rate: empty input")
    return float(np.mean(np.sort(ratios)))


def percentile_l1(predicted, target, q=99.0):
    """Nearest-rank percentile of |pred - target| pooled over all tokens.

    predicted/target: aligned flat arrays of per-token durations.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape or predicted.size == 0:
        raise ValueError("percentile_l1: need aligned non-empty arrays")
    if not 0.0 < q <= 100.0:
        raise ValueError("percentile_l1: q must be in (0, 100]")
    errors = np.sort(np.abs(predicted - target))
    idx = int(math.ceil((errors.size - 1) * q / 100.0))
    return float(errors[idx])


@dataclass
class MetricReport:
    """Objective comparison of one predicted corpus against the target."""

    jsd_pause: float
    jsd_nonpause: float
    punct_precision: float       # percent
    punct_recall: float
    punct_fbeta: float
    boundary_precision: float
    boundary_recall: float
    boundary_fbeta: float
    pause_rate: float            # words per pause
    speech_rate: float           # words per second
    percentile_l1: float         # frames
    percentile_q: float
    beta: float
    pause_threshold: float
    n_utterances: int

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def evaluate_durations(predicted, target, pause_threshold=DEFAULT_PAUSE_THRESHOLD,
                       beta=0.25, percentile_q=99.0):
    """Full metric suite for aligned predicted/target utterance lists."""
    predicted = list(predicted)
    target = list(target)
    if len(predicted) != len(target) or not predicted:
        raise ValueError("evaluate_durations: need equal-length non-empty lists")
    counts = _pause_counts(predicted, target, pause_threshold)
    pp, pr, pf = fbeta(*counts[PUNCTUATION], beta)
    bp, br, bf = fbeta(*counts["boundary"], beta)
    pred_flat = np.concatenate([u.durations() for u in predicted])
    targ_flat = np.concatenate([u.durations() for u in target])
    return MetricReport(
        jsd_pause=jsd(predicted, target, "pause"),
        jsd_nonpause=jsd(predicted, target, "nonpause"),
        punct_precision=100.0 * pp, punct_recall=100.0 * pr, punct_fbeta=100.0 * pf,
        boundary_precision=100.0 * bp, boundary_recall=100.0 * br, boundary_fbeta=100.0 * bf,
        pause_rate=pause_rate(predicted, pause_threshold),
        speech_rate=speech_rate(predicted),
        percentile_l1=percentile_l1(pred_flat, targ_flat, percentile_q),
        percentile_q=percentile_q,
        beta=beta,
        pause_threshold=pause_threshold,
        n_utterances=len(predicted),
    )


# -- model-in-the-loop sweeps ---------------------------------------------------


def sample_corpus(model, corpus, temperature, seed, stream, speech_rate_override=None,
                    pause_rate_override=None):
    from .conditioning import mean_speaker_embedding
    from .flow import sample_durations

    mean_spk = {s: mean_speaker_embedding(s, corpus.speaker_vectors)
                for s in corpus.speakers()}
    out = []
    for utt in corpus.utterances:
        gen = rng.derive(seed, *stream, utt.id)
        sample = sample_durations(model, utt, corpus, temperature, gen,
                                  speech_rate=speech_rate_override,
                                  pause_rate=pause_rate_override,
                                  mean_speaker=mean_spk[utt.speaker])
        out.append(replace_durations(utt, sample.frames))
    return out


def rate_response(model, corpus, values, control, temperature=0.7, seed=0,
                  pause_threshold=DEFAULT_PAUSE_THRESHOLD):
    """Measured rate deltas for a sweep of one control's override values.

    control: "speech" sweeps the speech-rate offset and measures
    words/second; "pause" sweeps the pause-rate offset and measures
    words/pause. The same random streams are reused per value, so
    requesting 0 reproduces the baseline exactly.
    """
    if control not in ("speech", "pause"):
        raise ValueError(f"unknown control {control!r}")

    def measure(value):
        kwargs = ({"speech_rate_override": value} if control == "speech"
                  else {"pause_rate_override": value})
        sampled = sample_corpus(model, corpus, temperature, seed,
                                  ("rate-sweep", control), **kwargs)
        if control == "speech":
            return speech_rate(sampled)
        return pause_rate(sampled, pause_threshold)

    baseline = measure(0.0)
    rows = []
    for value in values:
        rows.append({"requested": float(value),
                     "measured_delta": measure(float(value)) - baseline,
                     "baseline": baseline})
    return rows


def pause_nesting(model, prompts, values_desc, pause_threshold=DEFAULT_PAUSE_THRESHOLD):
    """Pause-set growth as the pause-rate offset decreases, at temperature 0.

    values_desc must be in decreasing order (fewer pauses -> more pauses).
    Returns per-value pause sets plus containment fractions between
    consecutive sweep steps.
    """
    if list(values_desc) != sorted(values_desc, reverse=True):
        raise ValueError("pause_nesting: values must be decreasing")
    per_value_sets = []
    for value in values_desc:
        sampled = sample_corpus(model, prompts, 0.0, 0, ("nesting",),
                                  pause_rate_override=float(value))
        sets = []
        for utt in sampled:
            punct, bound = pause_events(utt, pause_threshold)
            sets.append(frozenset(punct | bound))
        per_value_sets.append(sets)
    containment = []
    for prev, curr in zip(per_value_sets, per_value_sets[1:]):
        ok = sum(1 for a, b in zip(prev, curr) if a <= b)
        containment.append(ok / len(prev))
    return {
        "values": [float(v) for v in values_desc],
        "sets": per_value_sets,
        "containment": containment,
        "mean_pauses": [float(np.mean(np.sort([len(s) for s in sets])))
                        for sets in per_value_sets],
    }
