"""Command-line entry point.

One binary, subcommand style. Every run writes a manifest.json (resolved
config + seed + version) into its output directory; `--from-manifest`
re-executes a recorded run and reproduces its outputs bit-exactly. All
randomness flows from the single --seed.

Exit codes: 0 success, 1 selftest failure, 2 usage error, 3 missing
input, 4 invalid data or config, 5 runtime failure (e.g. divergence).
"""

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__, rng
from .corpus import (CorpusError, DEFAULT_PAUSE_THRESHOLD, load_corpus, replace_durations,
                     save_corpus)
from .metrics import (duration_histogram, evaluate_durations, rate_response)
from .serialize import load_arrays

EXIT_SELFTEST = 1
EXIT_MISSING = 3
EXIT_INVALID = 4
EXIT_RUNTIME = 5


def _write_manifest(out_dir, command, config):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"command": command, "config": config, "version": __version__}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def _corpus(path):
    if not os.path.isdir(path):
        raise FileNotFoundError(f"corpus directory not found: {path}")
    return load_corpus(path)


# -- subcommands ----------------------------------------------------------------


def cmd_gen_data(args):
    from .synthdata import GeneratorSpec, generate_splits

    if args.spec:
        with open(args.spec, encoding="utf-8") as fh:
            spec = GeneratorSpec.from_json(fh.read())
        spec = GeneratorSpec(**{**json.loads(spec.to_json()), "seed": args.seed})
    else:
        spec = GeneratorSpec(seed=args.seed)
    sizes = (args.train, args.dev, args.test)
    splits = generate_splits(spec, sizes)
    for name, corpus in zip(("train", "dev", "test"), splits):
        save_corpus(corpus, os.path.join(args.out, name))
    with open(os.path.join(args.out, "generator.json"), "w", encoding="utf-8") as fh:
        fh.write(spec.to_json() + "\n")
    _write_manifest(args.out, "gen-data", {"seed": args.seed, "train": args.train,
                                           "dev": args.dev, "test": args.test,
                                           "spec": args.spec})
    print(f"wrote {sum(sizes)} utterances under {args.out}")


def _train_config_flags(parser):
    parser.add_argument("--epochs", type=int, default=None, help="training epochs")
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--learning-rate", type=float, default=None)
    parser.add_argument("--pause-threshold", type=float, default=DEFAULT_PAUSE_THRESHOLD,
                        help="frames of separator silence that count as a pause")


def _apply_overrides(config, args, names):
    for name in names:
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None:
            setattr(config, name.replace("-", "_"), value)
    return config


def cmd_train_dur(args, with_labels=False):
    from .baselines import DurConfig, save_dur, train_dur

    train = _corpus(os.path.join(args.data, "train"))
    dev = _corpus(os.path.join(args.data, "dev"))
    config = DurConfig(seed=args.seed, use_pause_labels=with_labels,
                       pause_threshold=args.pause_threshold)
    _apply_overrides(config, args, ["epochs", "batch_size", "learning_rate", "encoder_dim"])
    model, curve = train_dur(train, dev, config)
    os.makedirs(args.out, exist_ok=True)
    save_dur(os.path.join(args.out, "model.ckpt"), model)
    _write_json(os.path.join(args.out, "curve.json"), curve)
    _write_manifest(args.out, "train-durp" if with_labels else "train-dur",
                    {"data": args.data, "seed": args.seed, **asdict(config)})
    print(f"trained {'Dur+P' if with_labels else 'Dur'}; "
          f"final dev MSE {curve[-1]['dev_mse']:.4f}")


def cmd_train_phrasing(args):
    from .baselines import PhrasingConfig, save_phrasing, select_threshold, train_phrasing

    train = _corpus(os.path.join(args.data, "train"))
    dev = _corpus(os.path.join(args.data, "dev"))
    config = PhrasingConfig(seed=args.seed, pause_threshold=args.pause_threshold)
    _apply_overrides(config, args, ["epochs", "batch_size", "learning_rate", "hidden"])
    clf, curve = train_phrasing(train, config)
    theta = select_threshold(clf, dev)
    os.makedirs(args.out, exist_ok=True)
    save_phrasing(os.path.join(args.out, "model.ckpt"), clf)
    _write_json(os.path.join(args.out, "curve.json"), curve)
    _write_manifest(args.out, "train-phrasing",
                    {"data": args.data, "seed": args.seed, **asdict(config)})
    print(f"trained phrasing classifier; threshold {theta:.2f}")


def cmd_train_flow(args):
    from .flow import FlowConfig, save_flow, train_flow
    from .corpus import corpus_stats

    train = _corpus(os.path.join(args.data, "train"))
    dev = _corpus(os.path.join(args.data, "dev"))
    config = FlowConfig(seed=args.seed, pause_threshold=args.pause_threshold)
    _apply_overrides(config, args, ["epochs", "batch_size", "learning_rate", "steps",
                                    "group", "hidden", "encoder_dim", "cond_dim",
                                    "speaker_proj", "scale_clamp"])
    model, curve = train_flow(train, dev, config)
    stats = corpus_stats(train.utterances, config.pause_threshold)
    os.makedirs(args.out, exist_ok=True)
    save_flow(os.path.join(args.out, "model.ckpt"), model, stats)
    _write_json(os.path.join(args.out, "curve.json"), curve)
    _write_manifest(args.out, "train-flow",
                    {"data": args.data, "seed": args.seed, **asdict(config)})
    print(f"trained flow; best dev NLL {min(c['dev_nll'] for c in curve):.4f}")


def _load_any_model(path):
    meta, _ = load_arrays(path)
    kind = meta.get("kind")
    if kind == "cauliflow-flow":
        from .flow import load_flow
        model, stats = load_flow(path)
        return "flow", model
    if kind == "cauliflow-dur":
        from .baselines import load_dur
        return "dur", load_dur(path)
    raise ValueError(f"{path}: unknown checkpoint kind {kind!r}")


def cmd_predict(args):
    corpus = _corpus(args.data)
    kind, model = _load_any_model(args.model)
    predicted = []
    if kind == "dur":
        classifier = None
        if model.config.use_pause_labels:
            if not args.phrasing:
                raise ValueError("this model needs --phrasing CHECKPOINT for pause labels")
            from .baselines import load_phrasing
            classifier = load_phrasing(args.phrasing)
        for utt in corpus.utterances:
            labels = classifier.predict(utt, corpus.word_features) if classifier else None
            predicted.append(replace_durations(utt, model.predict(utt, word_labels=labels)))
    else:
        from .conditioning import mean_speaker_embedding
        from .flow import sample_durations
        mean_spk = {s: mean_speaker_embedding(s, corpus.speaker_vectors)
                    for s in corpus.speakers()}
        for utt in corpus.utterances:
            gen = rng.derive(args.seed, "predict", utt.id)
            sample = sample_durations(model, utt, corpus, args.temperature, gen,
                                      speech_rate=args.speech_rate,
                                      pause_rate=args.pause_rate,
                                      mean_speaker=mean_spk[utt.speaker])
            predicted.append(replace_durations(utt, sample.frames))
    out_corpus = corpus.with_utterances(predicted)
    save_corpus(out_corpus, os.path.join(args.out, "predictions"))
    _write_manifest(args.out, "predict",
                    {"model": args.model, "phrasing": args.phrasing, "data": args.data,
                     "seed": args.seed, "temperature": args.temperature,
                     "speech_rate": args.speech_rate, "pause_rate": args.pause_rate})
    print(f"wrote predictions for {len(predicted)} utterances to {args.out}/predictions")


def cmd_evaluate(args):
    pred = _corpus(args.pred)
    target = _corpus(args.target)
    if [u.id for u in pred.utterances] != [u.id for u in target.utterances]:
        raise ValueError("evaluate: predicted and target corpora list different utterances")
    report = evaluate_durations(pred.utterances, target.utterances,
                                pause_threshold=args.pause_threshold)
    os.makedirs(args.out, exist_ok=True)
    flat = report.to_dict()
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        for key, value in flat.items():
            fh.write(f"{key} {value!r}\n")
    _write_json(os.path.join(args.out, "report.json"), flat)
    # punctuation duration histograms (predicted vs target)
    from .corpus import PUNCTUATION
    pred_punct = [t.duration for u in pred.utterances for t in u.tokens if t.kind == PUNCTUATION]
    targ_punct = [t.duration for u in target.utterances for t in u.tokens if t.kind == PUNCTUATION]
    ph = duration_histogram(pred_punct)
    th = duration_histogram(targ_punct)
    _write_csv(os.path.join(args.out, "punct_histogram.csv"),
               ["frames", "predicted", "target"],
               [(i, float(ph[i]), float(th[i])) for i in range(len(ph))])
    _write_manifest(args.out, "evaluate",
                    {"pred": args.pred, "target": args.target,
                     "pause_threshold": args.pause_threshold})
    for key, value in flat.items():
        print(f"{key} {value}")


def cmd_sweep_temperature(args):
    from .flow import load_flow
    corpus = _corpus(args.data)
    model, _ = load_flow(args.model)
    values = [float(v) for v in args.values.split(",")]
    from .metrics import jsd, percentile_l1 as pl1, sample_corpus
    rows = []
    targ_flat = np.concatenate([u.durations() for u in corpus.utterances])
    for temp in values:
        sampled = sample_corpus(model, corpus, temp, args.seed, ("sweep-temp", repr(temp)))
        pred_flat = np.concatenate([u.durations() for u in sampled])
        rows.append((temp,
                     jsd(sampled, corpus.utterances, "pause"),
                     jsd(sampled, corpus.utterances, "nonpause"),
                     pl1(pred_flat, targ_flat, args.percentile)))
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, "temperature_sweep.csv"),
               ["temperature", "jsd_pause", "jsd_nonpause",
                f"percentile{args.percentile:g}_l1"], rows)
    _write_manifest(args.out, "sweep-temperature",
                    {"model": args.model, "data": args.data, "values": args.values,
                     "seed": args.seed, "percentile": args.percentile})
    for row in rows:
        print("T=%g jsd_pause=%.4f jsd_nonpause=%.4f p%g=%g" % (row[0], row[1], row[2],
                                                                args.percentile, row[3]))


def cmd_sweep_rate(args):
    from .flow import load_flow
    corpus = _corpus(args.data)
    model, _ = load_flow(args.model)
    values = [float(v) for v in args.values.split(",")]
    rows = rate_response(model, corpus, values, args.control,
                         temperature=args.temperature, seed=args.seed,
                         pause_threshold=args.pause_threshold)
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, f"rate_sweep_{args.control}.csv"),
               ["requested", "measured_delta", "baseline"],
               [(r["requested"], r["measured_delta"], r["baseline"]) for r in rows])
    _write_manifest(args.out, "sweep-rate",
                    {"model": args.model, "data": args.data, "control": args.control,
                     "values": args.values, "seed": args.seed,
                     "temperature": args.temperature,
                     "pause_threshold": args.pause_threshold})
    for r in rows:
        print("requested=%+.3f measured=%+.4f" % (r["requested"], r["measured_delta"]))


def cmd_selftest(args):
    from .selfcheck import run_selftest
    ok = run_selftest(verbose=True)
    if not ok:
        sys.exit(EXIT_SELFTEST)
    print("selftest: all checks passed")


# -- parser -----------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="cauliflow",
                                     description="Phoneme-duration models with a "
                                                 "normalizing-flow option and rate control.")
    parser.add_argument("--from-manifest", metavar="FILE",
                        help="re-run a recorded command from its manifest.json")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--dev", type=int, default=200)
    p.add_argument("--test", type=int, default=200)
    p.add_argument("--spec", help="generator spec JSON (seed flag still wins)")

    for name in ("train-dur", "train-durp"):
        p = sub.add_parser(name, help=f"train the {'phrasing-conditioned ' if name.endswith('p') else ''}duration regressor")
        p.add_argument("--data", required=True, help="gen-data output root (train/ dev/)")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=0)
        _train_config_flags(p)

    p = sub.add_parser("train-phrasing", help="train the pause classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _train_config_flags(p)

    p = sub.add_parser("train-flow", help="train the normalizing-flow duration model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None, help="flow steps")
    p.add_argument("--group", type=int, default=None, help="tokens per squeezed frame")
    p.add_argument("--hidden", type=int, default=None, help="coupling conditioner width")
    _train_config_flags(p)

    p = sub.add_parser("predict", help="predict durations for a corpus")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--phrasing", help="phrasing checkpoint (for label-conditioned models)")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--speech-rate", type=float, default=None,
                   help="speech-rate offset override (words/s from the mean)")
    p.add_argument("--pause-rate", type=float, default=None,
                   help="pause-rate offset override (words/pause from the mean)")

    p = sub.add_parser("evaluate", help="compare predicted vs target durations")
    p.add_argument("--pred", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pause-threshold", type=float, default=DEFAULT_PAUSE_THRESHOLD)

    p = sub.add_parser("sweep-temperature", help="JSD / percentile error across temperatures")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--values", default="0.3,0.5,0.7,1.0")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--percentile", type=float, default=99.0)

    p = sub.add_parser("sweep-rate", help="requested vs measured rate deltas")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--control", choices=("speech", "pause"), required=True)
    p.add_argument("--values", default="-0.6,-0.4,-0.2,0,0.2,0.4,0.6")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--pause-threshold", type=float, default=DEFAULT_PAUSE_THRESHOLD)

    sub.add_parser("selftest", help="run the invariant checks")
    return parser


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-dur": lambda a: cmd_train_dur(a, with_labels=False),
    "train-durp": lambda a: cmd_train_dur(a, with_labels=True),
    "train-phrasing": cmd_train_phrasing,
    "train-flow": cmd_train_flow,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "sweep-temperature": cmd_sweep_temperature,
    "sweep-rate": cmd_sweep_rate,
    "selftest": cmd_selftest,
}


def _args_from_manifest(path):
    """Rebuild the namespace of a recorded run; outputs land next to the
    manifest, so a rerun overwrites (reproduces) the original artifacts."""
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if "command" not in manifest or "config" not in manifest:
        raise ValueError(f"{path}: not a run manifest")
    ns = argparse.Namespace(**manifest["config"])
    ns.command = manifest["command"]
    ns.from_manifest = None
    ns.out = os.path.dirname(os.path.abspath(path))
    return ns


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.from_manifest:
        args = _args_from_manifest(args.from_manifest)
    if not args.command:
        parser.print_help()
        return 2
    try:
        _HANDLERS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (CorpusError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
