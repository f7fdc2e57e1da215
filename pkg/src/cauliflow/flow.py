"""Conditional normalizing flow from a Gaussian prior to token durations.

Scalar per-token durations get channel structure by grouping consecutive
tokens into frames of ``group`` channels. Each of K steps applies, in the
normalizing (training) direction: per-channel actnorm, an LU-parameterised
invertible channel mixing, and an affine coupling whose scale/shift come
from the untransformed half plus projected conditioning. Sampling runs
the exact inverses in reverse order.

Masking keeps the density exact under padding: pad positions pass through
every transform unchanged (contributing zero log-det and zero prior
term), and channel mixing applies only to frames whose tokens are all
valid. Conditioner convolutions zero fully-padded frames after every
layer, so appending padding never changes the likelihood.

Integer frame durations are uniformly dequantized before the flow;
otherwise a continuous density on discrete data has unbounded likelihood.
Targets stay unnormalised (no z-scoring) — that worked best for this
model family. Coupling log-scales are soft-clamped to [-7, 7] through a
scaled tanh, which keeps inversion numerically exact while preventing
scale blow-ups.
"""

import math
from dataclasses import dataclass, asdict

import numpy as np
import scipy.linalg

from . import rng
from .conditioning import (PhonemeEncoder, bundle_from_prepared, mean_speaker_embedding,
                           prepare_utterance)
from .corpus import PHONEME, CorpusStats, corpus_stats
from .layers import Conv1d, Linear, gated, load_params, mask_rows
from .optim import Adam
from .serialize import load_arrays, save_arrays
from .tensor import Tensor, concat, exp, no_grad, tanh

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FlowConfig:
    steps: int = 6
    group: int = 4
    encoder_dim: int = 20
    cond_dim: int = 12
    hidden: int = 24
    speaker_proj: int = 8
    scale_clamp: float = 7.0
    pause_threshold: float = 4.0
    learning_rate: float = 2e-3
    final_learning_rate: float = 2e-4  # geometric decay target over the run
    epochs: int = 12
    batch_size: int = 8
    seed: int = 0


# -- squeeze / dequantize ----------------------------------------------------


def pad_to_group(values, group, fill=0.0):
    n = len(values)
    total = ((n + group - 1) // group) * group
    out = np.full(total, fill, dtype=np.float64)
    out[:n] = values
    return out


def place_by_mask(values, pad_mask, fill=0.0):
    """Scatter per-token values into a padded vector (pads keep ``fill``)."""
    out = np.full(len(pad_mask), fill, dtype=np.float64)
    out[~pad_mask] = values
    return out


def squeeze(values, group):
    """(P,) -> (P/group, group); requires len divisible by group."""
    values = np.asarray(values)
    if len(values) % group != 0:
        raise ValueError(f"squeeze: length {len(values)} not a multiple of {group}")
    return values.reshape(-1, group)


def unsqueeze(frames):
    return np.asarray(frames).reshape(-1)


def group_masks(pad_mask, group):
    """Per-channel validity, full-frame flag, and any-valid flag."""
    valid = squeeze(~pad_mask, group).astype(bool)
    return valid, valid.all(axis=1), valid.any(axis=1)


def dequantize(durations, gen):
    """Integer frames -> reals: d + u with u ~ Uniform[0, 1) per token."""
    durations = np.asarray(durations, dtype=np.float64)
    if np.any(durations < 0) or np.any(durations != np.round(durations)):
        raise ValueError("dequantize: durations must be non-negative integers")
    return durations + gen.uniform(0.0, 1.0, size=durations.shape)


def postprocess(real_durations, kinds):
    """Round to nearest frame and clamp: phonemes >= 1, separators >= 0.

    Returns (integer durations, clamp count).
    """
    real_durations = np.asarray(real_durations, dtype=np.float64)
    out = np.floor(real_durations + 0.5).astype(np.int64)
    clamped = 0
    for i, kind in enumerate(kinds):
        floor = 1 if kind == PHONEME else 0
        if out[i] < floor:
            out[i] = floor
            clamped += 1
    return out, clamped


@dataclass
class DurationSample:
    real: np.ndarray      # per-token sampled durations before rounding
    frames: np.ndarray    # integer durations after postprocessing
    temperature: float
    clamp_count: int


# -- flow internals ----------------------------------------------------------


def _blend(new, old, mask_float):
    """old + (new - old) * mask; mask 1 where the transform applies."""
    return old + (new - old) * Tensor(mask_float)


def _tile_row(row, n_rows):
    return Tensor(np.ones((n_rows, 1))) @ row


class FlowStep:
    """actnorm -> invertible channel mixing -> affine coupling."""

    def __init__(self, gen, config, cond_channels, parity):
        g = config.group
        h = g // 2
        self.group = g
        self.half = h
        self.parity = parity
        self.clamp = config.scale_clamp
        # actnorm, identity until data-dependent init
        self.an_log_scale = Tensor(np.zeros((1, g)), requires_grad=True)
        self.an_offset = Tensor(np.zeros((1, g)), requires_grad=True)
        # LU-parameterised mixing, started at a random rotation
        q, _ = np.linalg.qr(gen.normal(0.0, 1.0, (g, g)))
        perm, lower, upper = scipy.linalg.lu(q)
        diag = np.diag(upper).copy()
        self.mix_perm = perm
        self.mix_sign = np.sign(diag).reshape(1, g)
        self.mix_lower = Tensor(np.tril(lower, -1), requires_grad=True)
        self.mix_upper = Tensor(np.triu(upper, 1), requires_grad=True)
        self.mix_log_diag = Tensor(np.log(np.abs(diag)).reshape(1, g), requires_grad=True)
        # coupling conditioner: two dilated convs with gated activations,
        # zero-init output so the coupling starts as the identity
        self.cc1 = Conv1d(gen, 3, h + cond_channels, 2 * config.hidden, dilation=1)
        self.cc2 = Conv1d(gen, 3, config.hidden, 2 * config.hidden, dilation=2)
        self.cc_out = Linear(gen, config.hidden, 2 * h, zero_init=True)

    def params(self, prefix):
        named = {
            f"{prefix}.an_log_scale": self.an_log_scale,
            f"{prefix}.an_offset": self.an_offset,
            f"{prefix}.mix_lower": self.mix_lower,
            f"{prefix}.mix_upper": self.mix_upper,
            f"{prefix}.mix_log_diag": self.mix_log_diag,
        }
        named.update(self.cc1.params(f"{prefix}.cc1"))
        named.update(self.cc2.params(f"{prefix}.cc2"))
        named.update(self.cc_out.params(f"{prefix}.cc_out"))
        return named

    def fixed_arrays(self, prefix):
        return {f"{prefix}.mix_perm": self.mix_perm,
                f"{prefix}.mix_sign": self.mix_sign.astype(np.float64)}

    # actnorm ---------------------------------------------------------

    def _actnorm_fwd(self, x, valid_f):
        n = x.shape[0]
        scale = _tile_row(exp(self.an_log_scale), n)
        offset = _tile_row(self.an_offset, n)
        z = (x - offset) * scale
        logdet = (_tile_row(self.an_log_scale, n) * Tensor(valid_f)).sum()
        return _blend(z, x, valid_f), logdet

    def _actnorm_inv(self, z, valid_f):
        n = z.shape[0]
        scale = _tile_row(exp(-self.an_log_scale), n)
        offset = _tile_row(self.an_offset, n)
        x = z * scale + offset
        return _blend(x, z, valid_f)

    # channel mixing ----------------------------------------------------

    def _mixing_matrix(self):
        g = self.group
        eye = np.eye(g)
        lmask = np.tril(np.ones((g, g)), -1)
        umask = np.triu(np.ones((g, g)), 1)
        lower = self.mix_lower * Tensor(lmask) + Tensor(eye)
        diag = Tensor(eye) * (_tile_row(Tensor(self.mix_sign) * exp(self.mix_log_diag), g))
        upper = self.mix_upper * Tensor(umask) + diag
        return Tensor(self.mix_perm) @ lower @ upper

    def _mixing_fwd(self, x, full_f):
        w = self._mixing_matrix()
        z = x @ w
        n_full = float(full_f[:, 0].sum())
        logdet = self.mix_log_diag.sum() * n_full
        return _blend(z, x, full_f), logdet

    def _mixing_inv(self, z, full_f):
        w = self._mixing_matrix()
        x = z @ Tensor(np.linalg.inv(w.data))
        return _blend(x, z, full_f)

    # affine coupling -----------------------------------------------------

    def _halves(self):
        h = self.half
        if self.parity == 0:
            return slice(0, h), slice(h, self.group)
        return slice(h, self.group), slice(0, h)

    def _coupling_net(self, x_keep, cond):
        pad_frames = ~cond["frame_any"]
        net = concat([x_keep, cond["c_sq"]], axis=1)
        hidden = gated(self.cc1(net), self.cc1.weight.shape[2] // 2)
        hidden = mask_rows(hidden, pad_frames)
        hidden = gated(self.cc2(hidden), self.cc2.weight.shape[2] // 2)
        hidden = mask_rows(hidden, pad_frames)
        st = self.cc_out(hidden)
        h = self.half
        s_raw, shift = st[:, :h], st[:, h:]
        scale = tanh(s_raw * (1.0 / self.clamp)) * self.clamp
        keep_sl, trans_sl = self._halves()
        trans_invalid = ~cond["valid"][:, trans_sl]
        scale = scale.masked_fill(trans_invalid, 0.0)
        shift = shift.masked_fill(trans_invalid, 0.0)
        return scale, shift

    def _recombine(self, x_keep, x_trans):
        if self.parity == 0:
            return concat([x_keep, x_trans], axis=1)
        return concat([x_trans, x_keep], axis=1)

    def _coupling_fwd(self, x, cond, per_frame=None):
        keep_sl, trans_sl = self._halves()
        x_keep, x_trans = x[:, keep_sl], x[:, trans_sl]
        scale, shift = self._coupling_net(x_keep, cond)
        if per_frame is not None:
            per_frame -= scale.data.sum(axis=1)
        z_trans = (x_trans - shift) * exp(-scale)
        logdet = -scale.sum()
        return self._recombine(x_keep, z_trans), logdet

    def _coupling_inv(self, z, cond):
        keep_sl, trans_sl = self._halves()
        z_keep, z_trans = z[:, keep_sl], z[:, trans_sl]
        scale, shift = self._coupling_net(z_keep, cond)
        x_trans = z_trans * exp(scale) + shift
        return self._recombine(z_keep, x_trans)

    # step ----------------------------------------------------------------

    def normalize(self, x, cond, per_frame=None):
        """Training direction; returns (z, logdet contribution).

        When ``per_frame`` (an (F,) float array) is given, each frame's
        share of the log-det is accumulated into it (no-grad values).
        """
        if per_frame is not None:
            per_frame += (cond["valid_float"] * self.an_log_scale.data).sum(axis=1)
            per_frame += cond["full_float"][:, 0] * float(self.mix_log_diag.data.sum())
        x, ld_a = self._actnorm_fwd(x, cond["valid_float"])
        x, ld_m = self._mixing_fwd(x, cond["full_float"])
        x, ld_c = self._coupling_fwd(x, cond, per_frame=per_frame)
        return x, ld_a + ld_m + ld_c

    def generate(self, z, cond):
        """Sampling direction (exact inverse of normalize)."""
        z = self._coupling_inv(z, cond)
        z = self._mixing_inv(z, cond["full_float"])
        return self._actnorm_inv(z, cond["valid_float"])


class CauliflowModel:
    """Stack of flow steps plus the conditioning projector and encoder."""

    def __init__(self, inventory, word_feature_dim, speaker_dim, config):
        self.config = config
        self.inventory = list(inventory)
        self.word_feature_dim = word_feature_dim
        self.speaker_dim = speaker_dim
        self.encoder = PhonemeEncoder(inventory, config.encoder_dim, seed=config.seed)
        gen = rng.derive(config.seed, "flow-init")
        in_dim = config.encoder_dim + word_feature_dim + config.speaker_proj
        self.spk_proj = Linear(gen, speaker_dim, config.speaker_proj)
        self.cond_proj = Linear(gen, in_dim, config.cond_dim)
        self.rate_speech = Tensor(np.zeros((1, config.cond_dim)), requires_grad=True)
        self.rate_pause = Tensor(np.zeros((1, config.cond_dim)), requires_grad=True)
        cond_channels = config.cond_dim * config.group
        self.steps = [FlowStep(gen, config, cond_channels, parity=k % 2)
                      for k in range(config.steps)]
        self.actnorm_initialized = False

    def params(self):
        parts = [("encoder", self.encoder)]
        named = {}
        for prefix, part in parts:
            named.update(part.params(prefix))
        named.update(self.spk_proj.params("spk_proj"))
        named.update(self.cond_proj.params("cond_proj"))
        named["rate_speech"] = self.rate_speech
        named["rate_pause"] = self.rate_pause
        for k, step in enumerate(self.steps):
            named.update(step.params(f"step{k}"))
        return named

    def fixed_arrays(self):
        out = {}
        for k, step in enumerate(self.steps):
            out.update(step.fixed_arrays(f"step{k}"))
        return out

    # conditioning ---------------------------------------------------------

    def conditions(self, bundle):
        """Project the bundle to squeezed per-frame conditioning + masks."""
        g = self.config.group
        pad_mask = bundle.pad_mask
        n = len(pad_mask)
        valid, full, any_valid = group_masks(pad_mask, g)
        spk_row = self.spk_proj(Tensor(bundle.speaker.reshape(1, -1)))
        feats = concat([bundle.ph, Tensor(bundle.word), _tile_row(spk_row, n)], axis=1)
        c = self.cond_proj(feats)
        c = c + bundle.speech_rate_offset * _tile_row(self.rate_speech, n)
        c = c + bundle.pause_rate_offset * _tile_row(self.rate_pause, n)
        # kept linear: saturating it here would blunt the conditioner's
        # sensitivity to the word features
        c = mask_rows(c, pad_mask)
        # squeeze token-level conditioning to frame level: frame f holds
        # the g token vectors side by side
        c_sq = concat([c[k::g] for k in range(g)], axis=1)
        return {
            "c_sq": c_sq,
            "valid": valid,
            "frame_any": any_valid,
            "valid_float": valid.astype(np.float64),
            "full_float": np.repeat(full[:, None], g, axis=1).astype(np.float64),
            "n_valid": int(valid.sum()),
        }

    # transforms ------------------------------------------------------------

    def inverse_transform(self, y_frames, cond, per_frame=None):
        """Durations -> latent; returns (z, total log|det J| of the map).

        ``per_frame`` optionally collects each frame's log-det share.
        """
        x = y_frames if isinstance(y_frames, Tensor) else Tensor(y_frames)
        logdet = Tensor(0.0)
        for i, step in enumerate(self.steps):
            x, ld = step.normalize(x, cond, per_frame=per_frame)
            if not np.all(np.isfinite(x.data)):
                raise FloatingPointError(f"flow step {i}: non-finite output")
            logdet = logdet + ld
        return x, logdet

    def forward_transform(self, z_frames, cond):
        """Latent -> durations (sampling direction)."""
        x = z_frames if isinstance(z_frames, Tensor) else Tensor(z_frames)
        for step in reversed(self.steps):
            x = step.generate(x, cond)
        return x

    def log_likelihood(self, bundle, real_durations):
        """Exact log-density of (dequantized) durations given the bundle.

        Returns (total log-likelihood Tensor, number of valid tokens).
        """
        g = self.config.group
        y = place_by_mask(real_durations, bundle.pad_mask)
        cond = self.conditions(bundle)
        z, logdet = self.inverse_transform(squeeze(y, g), cond)
        masked_sq = (z * z) * Tensor(cond["valid_float"])
        n_valid = cond["n_valid"]
        prior = masked_sq.sum() * -0.5 + (-0.5 * _LOG_2PI * n_valid)
        return prior + logdet, n_valid

    # actnorm init -----------------------------------------------------------

    def initialize_actnorms(self, items, eps=1e-6):
        """Data-dependent init: unit per-channel moments at each step's input.

        ``items`` is a list of (squeezed dequantized durations, cond dict)
        from the first training batch. Steps are initialized sequentially,
        each on the batch statistics after the previous steps.
        """
        g = self.config.group
        with no_grad():
            for k, step in enumerate(self.steps):
                per_channel = [[] for _ in range(g)]
                for y_sq, cond in items:
                    x = Tensor(y_sq)
                    for j in range(k):
                        x, _ = self.steps[j].normalize(x, cond)
                    for c in range(g):
                        sel = cond["valid"][:, c]
                        if sel.any():
                            per_channel[c].append(x.data[sel, c])
                means = np.zeros(g)
                stds = np.ones(g)
                for c in range(g):
                    if per_channel[c]:
                        vals = np.concatenate(per_channel[c])
                        means[c] = vals.mean()
                        stds[c] = vals.std()
                step.an_offset.data = means.reshape(1, g)
                step.an_log_scale.data = -np.log(stds.reshape(1, g) + eps)
        self.actnorm_initialized = True


# -- training -----------------------------------------------------------------


def _nll_per_token(model, prep, y_real):
    bundle = bundle_from_prepared(prep, model.encoder)
    total, n_valid = model.log_likelihood(bundle, y_real)
    return total * (-1.0 / n_valid)


def train_flow(train_corpus, dev_corpus, config):
    """Maximum-likelihood training; returns (model, loss curve).

    Deterministic given config.seed: shuffles, dequantization noise, and
    init all come from derived streams. Keeps the best-dev-NLL parameters.
    Aborts with a diagnostic if the loss exceeds 10x its starting value.
    """
    if not train_corpus.utterances or not dev_corpus.utterances:
        raise ValueError("train_flow: empty split")
    stats = corpus_stats(train_corpus.utterances, config.pause_threshold)
    model = CauliflowModel(train_corpus.inventory, train_corpus.word_feature_dim,
                           train_corpus.speaker_dim, config)
    preps = [prepare_utterance(u, model.encoder, train_corpus, stats, pad_to=config.group)
             for u in train_corpus.utterances]
    dev_preps = [prepare_utterance(u, model.encoder, dev_corpus, stats, pad_to=config.group)
                 for u in dev_corpus.utterances]
    dev_reals = [dequantize(p.durations, rng.derive(config.seed, "dequant-dev", p.utt_id))
                 for p in dev_preps]

    # actnorm init on the first batch
    init_items = []
    with no_grad():
        for prep in preps[:max(config.batch_size, 8)]:
            y = dequantize(prep.durations, rng.derive(config.seed, "dequant", 0, prep.utt_id))
            bundle = bundle_from_prepared(prep, model.encoder)
            cond = model.conditions(bundle)
            init_items.append((squeeze(place_by_mask(y, prep.pad_mask), config.group), cond))
    model.initialize_actnorms(init_items)

    params = model.params()
    opt = Adam(params.values(), lr=config.learning_rate)
    curve = []
    best_dev = math.inf
    best_params = None
    initial = None

    def dev_nll():
        with no_grad():
            vals = [float(_nll_per_token(model, p, y).data)
                    for p, y in zip(dev_preps, dev_reals)]
        return float(np.mean(vals))

    for epoch in range(config.epochs):
        if config.epochs > 1 and config.final_learning_rate:
            frac = epoch / (config.epochs - 1)
            opt.lr = config.learning_rate * (config.final_learning_rate
                                             / config.learning_rate) ** frac
        order = rng.derive(config.seed, "shuffle", epoch).permutation(len(preps))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [preps[i] for i in order[start:start + config.batch_size]]
            opt.zero_grad()
            loss = Tensor(0.0)
            for prep in batch:
                y = dequantize(prep.durations,
                               rng.derive(config.seed, "dequant", epoch, prep.utt_id))
                loss = loss + _nll_per_token(model, prep, y)
            loss = loss * (1.0 / len(batch))
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.data))
        train_nll = float(np.mean(epoch_losses))
        if initial is None:
            initial = train_nll
        threshold = initial * 10.0 if initial > 0 else initial / 10.0
        if not math.isfinite(train_nll) or train_nll > threshold:
            raise RuntimeError(
                f"train_flow diverged at epoch {epoch}: NLL {train_nll:.3f} vs initial {initial:.3f}")
        d = dev_nll()
        curve.append({"epoch": epoch, "train_nll": train_nll, "dev_nll": d})
        if d < best_dev:
            best_dev = d
            best_params = {k: v.data.copy() for k, v in params.items()}
    if best_params is not None:
        for k, v in params.items():
            v.data = best_params[k].copy()
    return model, curve


# -- sampling -----------------------------------------------------------------


def sample_durations(model, utt, corpus, temperature, gen, speech_rate=None,
                     pause_rate=None, mean_speaker=None):
    """Draw durations for one utterance's text at the given temperature.

    temperature 0 uses the deterministic mode path z = 0; higher values
    scale the prior standard deviation. Rate overrides default to 0
    (average pace / pausing).
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    g = model.config.group
    if mean_speaker is None:
        mean_speaker = mean_speaker_embedding(utt.speaker, corpus.speaker_vectors)
    prep = prepare_utterance(utt, model.encoder, corpus, pad_to=g, training=False,
                             mean_speaker=mean_speaker, speech_rate=speech_rate,
                             pause_rate=pause_rate)
    with no_grad():
        bundle = bundle_from_prepared(prep, model.encoder)
        cond = model.conditions(bundle)
        shape = (len(prep.pad_mask) // g, g)
        if temperature == 0:
            z = np.zeros(shape)
        else:
            z = gen.normal(0.0, 1.0, size=shape) * temperature
        z[~cond["valid"]] = 0.0
        y_sq = model.forward_transform(z, cond)
    real = unsqueeze(y_sq.data)[~prep.pad_mask]
    frames, clamp_count = postprocess(real, prep.kinds)
    return DurationSample(real=real, frames=frames, temperature=float(temperature),
                          clamp_count=clamp_count)


# -- persistence ---------------------------------------------------------------


def save_flow(path, model, stats):
    meta = {
        "kind": "cauliflow-flow",
        "config": asdict(model.config),
        "inventory": model.inventory,
        "word_feature_dim": model.word_feature_dim,
        "speaker_dim": model.speaker_dim,
        "actnorm_initialized": model.actnorm_initialized,
        "stats": {"words_per_second_mean": stats.words_per_second_mean,
                  "words_per_pause_mean": stats.words_per_pause_mean,
                  "pause_threshold": stats.pause_threshold},
    }
    arrays = {k: v.data for k, v in model.params().items()}
    arrays.update(model.fixed_arrays())
    save_arrays(path, arrays, meta=meta)


def load_flow(path):
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "cauliflow-flow":
        raise ValueError(f"{path}: not a flow checkpoint")
    config = FlowConfig(**meta["config"])
    model = CauliflowModel(meta["inventory"], meta["word_feature_dim"],
                           meta["speaker_dim"], config)
    fixed = model.fixed_arrays()
    params = model.params()
    load_params(params, {k: v for k, v in arrays.items() if k in params})
    for name in fixed:
        step_idx = int(name.split(".")[0][4:])
        if name.endswith("mix_perm"):
            model.steps[step_idx].mix_perm = arrays[name]
        else:
            model.steps[step_idx].mix_sign = arrays[name]
    model.actnorm_initialized = bool(meta["actnorm_initialized"])
    stats = CorpusStats(**meta["stats"])
    return model, stats
