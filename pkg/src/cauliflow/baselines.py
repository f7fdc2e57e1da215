"""Deterministic duration models and the phrase-break classifier.

The plain regressor predicts z-scored durations per token with an L2
loss, so it converges to conditional means: at pause sites with bimodal
durations it lands between the modes and never commits to a pause. The
phrasing-conditioned variant adds one input channel carrying the pause
label of each token's word (oracle labels in training, classifier output
at inference), which splits those conditional means.

The phrasing classifier is a word-level dilated conv stack over the word
feature vectors with a sigmoid head, trained with cross entropy. Its
binarisation threshold is picked on dev to maximise F_beta with beta
favouring precision, tie-breaking toward higher precision.
"""

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import rng
from .conditioning import PhonemeEncoder
from .corpus import extract_pause_labels
from .flow import postprocess
from .layers import Conv1d, Linear, load_params
from .optim import Adam
from .serialize import load_arrays, save_arrays
from .tensor import Tensor, no_grad, softplus, tanh


@dataclass
class DurConfig:
    encoder_dim: int = 20
    pause_threshold: float = 4.0
    learning_rate: float = 2e-3
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    use_pause_labels: bool = False


@dataclass
class PhrasingConfig:
    hidden: int = 16
    pause_threshold: float = 4.0
    learning_rate: float = 2e-3
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0


class DurModel:
    """Token-level duration regressor (optionally phrasing-conditioned)."""

    def __init__(self, inventory, config, norm_mean=0.0, norm_std=1.0):
        self.config = config
        self.inventory = list(inventory)
        extra = 1 if config.use_pause_labels else 0
        self.encoder = PhonemeEncoder(inventory, config.encoder_dim, seed=config.seed,
                                      extra_channels=extra)
        gen = rng.derive(config.seed, "dur-head")
        self.head = Linear(gen, config.encoder_dim, 1)
        self.norm_mean = float(norm_mean)
        self.norm_std = float(norm_std)

    def params(self):
        named = self.encoder.params("encoder")
        named.update(self.head.params("head"))
        return named

    def _forward(self, utt, word_labels=None):
        ids = self.encoder.ids_for(utt.tokens)
        pad_mask = np.zeros(len(ids), dtype=bool)
        extra = None
        if self.config.use_pause_labels:
            if word_labels is None:
                raise ValueError("model was trained with pause labels; none given")
            per_token = np.array([word_labels[t.word_index] for t in utt.tokens],
                                 dtype=np.float64).reshape(-1, 1)
            extra = Tensor(per_token)
        h = self.encoder.encode(ids, pad_mask, extra=extra)
        return self.head(h)

    def predict(self, utt, word_labels=None):
        """Integer durations for one utterance (deterministic)."""
        with no_grad():
            z = self._forward(utt, word_labels).data[:, 0]
        real = z * self.norm_std + self.norm_mean
        frames, _ = postprocess(real, [t.kind for t in utt.tokens])
        return frames


def _duration_norm(corpus):
    all_durations = np.concatenate([u.durations() for u in corpus.utterances])
    return float(all_durations.mean()), float(all_durations.std())


def train_dur(train_corpus, dev_corpus, config):
    """L2 training on z-scored durations; returns (model, loss curve).

    For the phrasing-conditioned variant, oracle pause labels (derived
    from target durations at the configured threshold) are the extra
    input channel.
    """
    if not train_corpus.utterances or not dev_corpus.utterances:
        raise ValueError("train_dur: empty split")
    mean, std = _duration_norm(train_corpus)
    if std <= 0:
        std = 1.0
    model = DurModel(train_corpus.inventory, config, norm_mean=mean, norm_std=std)

    def oracle_labels(utt):
        if not config.use_pause_labels:
            return None
        return extract_pause_labels(utt, config.pause_threshold)

    def utt_loss(utt):
        pred = model._forward(utt, oracle_labels(utt))
        target = Tensor(((utt.durations() - mean) / std).reshape(-1, 1))
        diff = pred - target
        return (diff * diff).mean()

    params = model.params()
    opt = Adam(params.values(), lr=config.learning_rate)
    curve = []
    best_dev = math.inf
    best_params = None
    initial = None
    utts = train_corpus.utterances
    for epoch in range(config.epochs):
        order = rng.derive(config.seed, "dur-shuffle", epoch).permutation(len(utts))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [utts[i] for i in order[start:start + config.batch_size]]
            opt.zero_grad()
            loss = Tensor(0.0)
            for utt in batch:
                loss = loss + utt_loss(utt)
            loss = loss * (1.0 / len(batch))
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        train_loss = float(np.mean(losses))
        if initial is None:
            initial = train_loss
        if not math.isfinite(train_loss) or train_loss > max(initial * 10.0, 1.0):
            raise RuntimeError(f"train_dur diverged at epoch {epoch}: loss {train_loss:.4f}")
        with no_grad():
            dev_loss = float(np.mean([float(utt_loss(u).data) for u in dev_corpus.utterances]))
        curve.append({"epoch": epoch, "train_mse": train_loss, "dev_mse": dev_loss})
        if dev_loss < best_dev:
            best_dev = dev_loss
            best_params = {k: v.data.copy() for k, v in params.items()}
    if best_params is not None:
        for k, v in params.items():
            v.data = best_params[k].copy()
    return model, curve


# -- phrasing classifier ------------------------------------------------------


class PhrasingClassifier:
    """Word-level pause-probability model plus calibrated threshold."""

    def __init__(self, word_feature_dim, config):
        self.config = config
        self.word_feature_dim = word_feature_dim
        gen = rng.derive(config.seed, "phrasing")
        h = config.hidden
        self.conv1 = Conv1d(gen, 3, word_feature_dim, h, dilation=1)
        self.conv2 = Conv1d(gen, 3, h, h, dilation=2)
        # zero-init head: untrained probabilities sit exactly at 0.5
        self.head = Linear(gen, h, 1, zero_init=True)
        self.threshold = None

    def params(self):
        named = self.conv1.params("conv1")
        named.update(self.conv2.params("conv2"))
        named.update(self.head.params("head"))
        return named

    def _logits(self, utt, word_features):
        rows = np.stack([word_features[(utt.id, w)] for w in range(utt.num_words)])
        h = tanh(self.conv1(Tensor(rows)))
        h = tanh(self.conv2(h))
        return self.head(h)

    def predict_proba(self, utt, word_features):
        with no_grad():
            logits = self._logits(utt, word_features).data[:, 0]
        return 1.0 / (1.0 + np.exp(-logits))

    def predict(self, utt, word_features):
        """Binary pause-after-word decisions at the calibrated threshold."""
        if self.threshold is None:
            raise ValueError("threshold not set; run select_threshold first")
        return (self.predict_proba(utt, word_features) >= self.threshold).astype(np.int64)


def train_phrasing(train_corpus, config):
    """Word-level cross-entropy training; returns (classifier, curve).

    The threshold is NOT set here; call select_threshold on a dev split.
    """
    if not train_corpus.utterances:
        raise ValueError("train_phrasing: empty split")
    labels = {u.id: extract_pause_labels(u, config.pause_threshold)
              for u in train_corpus.utterances}
    positives = sum(int(l.sum()) for l in labels.values())
    if positives == 0:
        raise ValueError("train_phrasing: no positive pause labels at this threshold")
    clf = PhrasingClassifier(train_corpus.word_feature_dim, config)

    def utt_loss(utt, lab):
        x = clf._logits(utt, train_corpus.word_features)
        y = Tensor(np.asarray(lab, dtype=np.float64).reshape(-1, 1))
        # cross entropy via softplus: -log sigma(x) = softplus(-x)
        loss = y * softplus(-x) + (1.0 - y) * softplus(x)
        return loss.mean()

    params = clf.params()
    opt = Adam(params.values(), lr=config.learning_rate)
    curve = []
    utts = train_corpus.utterances
    initial = None
    for epoch in range(config.epochs):
        order = rng.derive(config.seed, "phrasing-shuffle", epoch).permutation(len(utts))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [utts[i] for i in order[start:start + config.batch_size]]
            opt.zero_grad()
            loss = Tensor(0.0)
            for utt in batch:
                loss = loss + utt_loss(utt, labels[utt.id])
            loss = loss * (1.0 / len(batch))
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        train_loss = float(np.mean(losses))
        if initial is None:
            initial = train_loss
        if not math.isfinite(train_loss) or train_loss > max(initial * 10.0, 2.0):
            raise RuntimeError(f"train_phrasing diverged at epoch {epoch}")
        curve.append({"epoch": epoch, "train_bce": train_loss})
    return clf, curve


def select_threshold(classifier, dev_corpus, beta=0.25, grid_step=0.01):
    """Grid-search the binarisation threshold maximising F_beta on dev.

    Ties break toward the highest threshold (higher precision).
    """
    from .metrics import fbeta

    probs = []
    labels = []
    for utt in dev_corpus.utterances:
        probs.append(classifier.predict_proba(utt, dev_corpus.word_features))
        labels.append(extract_pause_labels(utt, classifier.config.pause_threshold))
    probs = np.concatenate(probs)
    labels = np.concatenate(labels)
    if labels.sum() == 0:
        raise ValueError("select_threshold: dev split has no positive labels")
    best_f = -1.0
    best_theta = None
    thetas = np.round(np.arange(0.0, 1.0 + 1e-9, grid_step), 10)
    for theta in thetas:
        pred = probs >= theta
        tp = int(np.sum(pred & (labels == 1)))
        fp = int(np.sum(pred & (labels == 0)))
        fn = int(np.sum(~pred & (labels == 1)))
        _, _, f = fbeta(tp, fp, fn, beta)
        if f >= best_f:
            best_f = f
            best_theta = float(theta)
    classifier.threshold = best_theta
    return best_theta


def predict_with_phrasing(dur_model, classifier, utt, word_features):
    """Dur+P inference: classifier decisions feed the duration model."""
    decisions = classifier.predict(utt, word_features)
    return dur_model.predict(utt, word_labels=decisions)


# -- persistence ---------------------------------------------------------------


def save_dur(path, model):
    meta = {"kind": "cauliflow-dur", "config": asdict(model.config),
            "inventory": model.inventory,
            "norm_mean": model.norm_mean, "norm_std": model.norm_std}
    save_arrays(path, {k: v.data for k, v in model.params().items()}, meta=meta)


def load_dur(path):
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "cauliflow-dur":
        raise ValueError(f"{path}: not a duration-model checkpoint")
    model = DurModel(meta["inventory"], DurConfig(**meta["config"]),
                     norm_mean=meta["norm_mean"], norm_std=meta["norm_std"])
    load_params(model.params(), arrays)
    return model


def save_phrasing(path, classifier):
    meta = {"kind": "cauliflow-phrasing", "config": asdict(classifier.config),
            "word_feature_dim": classifier.word_feature_dim,
            "threshold": classifier.threshold}
    save_arrays(path, {k: v.data for k, v in classifier.params().items()}, meta=meta)


def load_phrasing(path):
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "cauliflow-phrasing":
        raise ValueError(f"{path}: not a phrasing checkpoint")
    clf = PhrasingClassifier(meta["word_feature_dim"], PhrasingConfig(**meta["config"]))
    load_params(clf.params(), arrays)
    clf.threshold = meta["threshold"]
    return clf
