"""Data model, file I/O, and statistics for duration-annotated utterances.

An utterance is a flat token sequence: phoneme tokens grouped into words,
with exactly one separator token (word boundary or punctuation) between
consecutive words and optionally one trailing punctuation token. Each
token carries a frame duration (12.5 ms frames). Durations are integers
on disk and float64 in memory.

A pause is a separator token whose duration reaches the pause threshold
(default 4 frames = 50 ms, the shortest perceptually salient silence).

Corpus directory layout (all plain text, versioned headers):
    utterances.jsonl      one JSON record per utterance
    inventory.txt         one token symbol per line
    word_features.tsv     utterance_id <TAB> word_index <TAB> floats
    speaker_vectors.tsv   speaker_id <TAB> utterance_id <TAB> floats
"""

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import rng

FRAME_SECONDS = 0.0125

PHONEME = "ph"
BOUNDARY = "wb"
PUNCTUATION = "punct"
KINDS = (PHONEME, BOUNDARY, PUNCTUATION)

DEFAULT_PAUSE_THRESHOLD = 4.0  # frames; 50 ms at 12.5 ms/frame

_UTT_HEADER = {"format": "cauliflow-corpus", "version": 1}
_INV_HEADER = "#cauliflow-inventory 1"
_WF_HEADER = "#cauliflow-word-features 1"
_SPK_HEADER = "#cauliflow-speaker-vectors 1"


class CorpusError(ValueError):
    """Malformed or inconsistent corpus data. Loading rejects, never repairs."""


def is_separator(kind):
    return kind in (BOUNDARY, PUNCTUATION)


@dataclass(frozen=True)
class Token:
    kind: str
    symbol: str
    word_index: int
    duration: float


@dataclass(frozen=True)
class Word:
    text: str
    start: int  # first phoneme token index
    end: int    # one past last phoneme token index


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker: str
    words: tuple
    tokens: tuple

    @property
    def total_frames(self):
        return float(sum(t.duration for t in self.tokens))

    @property
    def num_words(self):
        return len(self.words)

    @property
    def duration_seconds(self):
        return self.total_frames * FRAME_SECONDS

    def durations(self):
        return np.array([t.duration for t in self.tokens], dtype=np.float64)

    def separator_after(self, word_index):
        """Token index of the separator following a word, or None."""
        end = self.words[word_index].end
        if end < len(self.tokens) and is_separator(self.tokens[end].kind):
            return end
        return None


def replace_durations(utt, durations):
    """Copy of ``utt`` with token durations replaced (aligned by position)."""
    if len(durations) != len(utt.tokens):
        raise ValueError(f"{utt.id}: {len(durations)} durations for {len(utt.tokens)} tokens")
    tokens = tuple(replace(t, duration=float(d)) for t, d in zip(utt.tokens, durations))
    return replace(utt, tokens=tokens)


@dataclass
class Corpus:
    utterances: list
    inventory: list
    word_features: dict      # (utterance_id, word_index) -> float64 vector
    speaker_vectors: dict    # (speaker_id, utterance_id) -> float64 vector
    word_feature_dim: int
    speaker_dim: int

    def with_utterances(self, utterances):
        return Corpus(list(utterances), self.inventory, self.word_features,
                      self.speaker_vectors, self.word_feature_dim, self.speaker_dim)

    def speakers(self):
        seen = []
        for utt in self.utterances:
            if utt.speaker not in seen:
                seen.append(utt.speaker)
        return seen


@dataclass(frozen=True)
class CorpusStats:
    """Training-split rate statistics used as conditioning reference points."""

    words_per_second_mean: float
    words_per_pause_mean: float
    pause_threshold: float


# -- validation -----------------------------------------------------------


def validate_utterance(utt, inventory=None):
    inv = set(inventory) if inventory is not None else None
    if not utt.words:
        raise CorpusError(f"{utt.id}: utterance has no words")
    expected = 0
    for w, word in enumerate(utt.words):
        if word.end - word.start < 1:
            raise CorpusError(f"{utt.id}: word {w} spans no phoneme tokens")
        if word.start != expected:
            raise CorpusError(f"{utt.id}: word {w} starts at token {word.start}, expected {expected}")
        for i in range(word.start, word.end):
            tok = utt.tokens[i]
            if tok.kind != PHONEME:
                raise CorpusError(f"{utt.id}: token {i} inside word {w} is {tok.kind}, expected phoneme")
            if tok.word_index != w:
                raise CorpusError(f"{utt.id}: token {i} has word_index {tok.word_index}, expected {w}")
        expected = word.end
        last = w == len(utt.words) - 1
        has_sep = expected < len(utt.tokens) and is_separator(utt.tokens[expected].kind)
        if not last and not has_sep:
            raise CorpusError(f"{utt.id}: missing separator token after word {w}")
        if has_sep:
            sep = utt.tokens[expected]
            if sep.word_index != w:
                raise CorpusError(f"{utt.id}: separator after word {w} has word_index {sep.word_index}")
            expected += 1
    if expected != len(utt.tokens):
        raise CorpusError(f"{utt.id}: {len(utt.tokens) - expected} trailing tokens outside word structure")
    for i, tok in enumerate(utt.tokens):
        if tok.kind not in KINDS:
            raise CorpusError(f"{utt.id}: token {i} has unknown kind {tok.kind!r}")
        if inv is not None and tok.symbol not in inv:
            raise CorpusError(f"{utt.id}: token {i} symbol {tok.symbol!r} not in inventory")
        if tok.duration < 0:
            raise CorpusError(f"{utt.id}: token {i} has negative duration {tok.duration}")
        if tok.kind == PHONEME and tok.duration < 1:
            raise CorpusError(f"{utt.id}: phoneme token {i} has duration {tok.duration} < 1")


def validate_corpus(corpus):
    ids = set()
    for utt in corpus.utterances:
        if utt.id in ids:
            raise CorpusError(f"duplicate utterance id {utt.id}")
        ids.add(utt.id)
        validate_utterance(utt, corpus.inventory)
        for w in range(utt.num_words):
            key = (utt.id, w)
            if key not in corpus.word_features:
                raise CorpusError(f"{utt.id}: word {w} has no feature vector")
        if not any(k[0] == utt.speaker for k in corpus.speaker_vectors):
            raise CorpusError(f"{utt.id}: speaker {utt.speaker} has no speaker vectors")
    for key, vec in corpus.word_features.items():
        if vec.shape != (corpus.word_feature_dim,):
            raise CorpusError(f"word feature {key} has dim {vec.shape}, expected ({corpus.word_feature_dim},)")
    for key, vec in corpus.speaker_vectors.items():
        if vec.shape != (corpus.speaker_dim,):
            raise CorpusError(f"speaker vector {key} has dim {vec.shape}, expected ({corpus.speaker_dim},)")


# -- pause labels and statistics -------------------------------------------


def extract_pause_labels(utt, pause_threshold=DEFAULT_PAUSE_THRESHOLD):
    """Binary label per word: 1 iff the separator after it is a pause.

    The last word's label comes from the trailing punctuation token when
    present, else 0. Monotone in the threshold: raising it never turns a
    0 into a 1.
    """
    if pause_threshold < 1:
        raise ValueError("pause_threshold must be >= 1 frame")
    labels = np.zeros(utt.num_words, dtype=np.int64)
    for w in range(utt.num_words):
        sep = utt.separator_after(w)
        if sep is not None and utt.tokens[sep].duration >= pause_threshold:
            labels[w] = 1
    return labels


def count_pauses(utt, pause_threshold=DEFAULT_PAUSE_THRESHOLD):
    return sum(1 for t in utt.tokens
               if is_separator(t.kind) and t.duration >= pause_threshold)


def corpus_stats(utterances, pause_threshold=DEFAULT_PAUSE_THRESHOLD):
    """Mean words/second and words/pause over a training split.

    Words-per-pause averages the per-utterance ratio W/S over utterances
    with at least one pause; pause-free utterances would divide by zero
    and are excluded from that mean.
    """
    utterances = list(utterances)
    if not utterances:
        raise ValueError("corpus_stats: empty split")
    ws = []
    wp = []
    for utt in utterances:
        seconds = utt.duration_seconds
        if seconds <= 0:
            raise CorpusError(f"{utt.id}: zero total duration")
        ws.append(utt.num_words / seconds)
        pauses = count_pauses(utt, pause_threshold)
        if pauses >= 1:
            wp.append(utt.num_words / pauses)
    if not wp:
        raise ValueError("corpus_stats: no utterance has a pause; words-per-pause undefined")
    return CorpusStats(
        words_per_second_mean=float(np.mean(ws)),
        words_per_pause_mean=float(np.mean(wp)),
        pause_threshold=float(pause_threshold),
    )


def upsample_by_durations(vectors, durations):
    """Repeat row i of ``vectors`` durations[i] times (frame-level expansion)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    durations = np.asarray(durations)
    if len(vectors) != len(durations):
        raise ValueError(f"upsample: {len(vectors)} vectors vs {len(durations)} durations")
    if np.any(durations < 0):
        raise ValueError("upsample: negative duration")
    if not np.all(durations == durations.astype(np.int64)):
        raise ValueError("upsample: durations must be integers")
    return np.repeat(vectors, durations.astype(np.int64), axis=0)


def split_corpus(corpus, seed, ratios=(0.8, 0.1, 0.1)):
    """Deterministic utterance-level train/dev/test partition."""
    if not corpus.utterances:
        raise ValueError("split_corpus: empty corpus")
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise ValueError(f"split_corpus: ratios must be 3 values summing to 1, got {ratios}")
    n = len(corpus.utterances)
    order = rng.derive(seed, "split").permutation(n)
    n_train = int(ratios[0] * n + 1e-9)
    n_dev = int(ratios[1] * n + 1e-9)
    picks = [order[:n_train], order[n_train:n_train + n_dev], order[n_train + n_dev:]]
    return tuple(corpus.with_utterances([corpus.utterances[i] for i in sorted(p)]) for p in picks)


# -- file I/O ---------------------------------------------------------------


def _fmt_floats(vec):
    return " ".join(repr(float(x)) for x in vec)


def save_corpus(corpus, path):
    """Write the corpus directory. Deterministic bytes for identical input."""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "utterances.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(_UTT_HEADER, sort_keys=True) + "\n")
        for utt in corpus.utterances:
            rec = {
                "id": utt.id,
                "speaker": utt.speaker,
                "words": [{"text": w.text, "start": w.start, "end": w.end} for w in utt.words],
                "tokens": [],
            }
            for i, t in enumerate(utt.tokens):
                if t.duration != int(t.duration):
                    raise CorpusError(f"{utt.id}: token {i} duration {t.duration} is not an integer")
                rec["tokens"].append({"kind": t.kind, "sym": t.symbol, "word": t.word_index,
                                      "dur": int(t.duration)})
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    with open(os.path.join(path, "inventory.txt"), "w", encoding="utf-8") as fh:
        fh.write(_INV_HEADER + "\n")
        for sym in corpus.inventory:
            fh.write(sym + "\n")
    with open(os.path.join(path, "word_features.tsv"), "w", encoding="utf-8") as fh:
        fh.write(f"{_WF_HEADER} {corpus.word_feature_dim}\n")
        for (utt_id, widx), vec in corpus.word_features.items():
            fh.write(f"{utt_id}\t{widx}\t{_fmt_floats(vec)}\n")
    with open(os.path.join(path, "speaker_vectors.tsv"), "w", encoding="utf-8") as fh:
        fh.write(f"{_SPK_HEADER} {corpus.speaker_dim}\n")
        for (spk, utt_id), vec in corpus.speaker_vectors.items():
            fh.write(f"{spk}\t{utt_id}\t{_fmt_floats(vec)}\n")


def _parse_utterance(rec, lineno):
    try:
        words = tuple(Word(w["text"], int(w["start"]), int(w["end"])) for w in rec["words"])
        tokens = tuple(Token(t["kind"], t["sym"], int(t["word"]), float(t["dur"]))
                       for t in rec["tokens"])
        return Utterance(rec["id"], rec["speaker"], words, tokens)
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"utterances.jsonl line {lineno}: malformed record ({exc})") from exc


def load_corpus(path):
    """Load and fully validate a corpus directory."""
    utt_path = os.path.join(path, "utterances.jsonl")
    if not os.path.exists(utt_path):
        raise FileNotFoundError(f"no corpus at {path}: missing utterances.jsonl")
    utterances = []
    with open(utt_path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "cauliflow-corpus" or header.get("version") != 1:
            raise CorpusError(f"{utt_path}: unsupported header {header}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            utterances.append(_parse_utterance(json.loads(line), lineno))

    inv_path = os.path.join(path, "inventory.txt")
    with open(inv_path, encoding="utf-8") as fh:
        if fh.readline().rstrip("\n") != _INV_HEADER:
            raise CorpusError(f"{inv_path}: bad header")
        inventory = [line.rstrip("\n") for line in fh if line.rstrip("\n")]

    wf_path = os.path.join(path, "word_features.tsv")
    word_features = {}
    with open(wf_path, encoding="utf-8") as fh:
        head = fh.readline().rstrip("\n").split(" ")
        if " ".join(head[:2]) != _WF_HEADER:
            raise CorpusError(f"{wf_path}: bad header")
        wf_dim = int(head[2])
        for line in fh:
            if not line.strip():
                continue
            utt_id, widx, vals = line.rstrip("\n").split("\t")
            word_features[(utt_id, int(widx))] = np.array([float(v) for v in vals.split(" ")])

    spk_path = os.path.join(path, "speaker_vectors.tsv")
    speaker_vectors = {}
    with open(spk_path, encoding="utf-8") as fh:
        head = fh.readline().rstrip("\n").split(" ")
        if " ".join(head[:2]) != _SPK_HEADER:
            raise CorpusError(f"{spk_path}: bad header")
        spk_dim = int(head[2])
        for line in fh:
            if not line.strip():
                continue
            spk, utt_id, vals = line.rstrip("\n").split("\t")
            speaker_vectors[(spk, utt_id)] = np.array([float(v) for v in vals.split(" ")])

    corpus = Corpus(utterances, inventory, word_features, speaker_vectors, wf_dim, spk_dim)
    validate_corpus(corpus)
    return corpus
