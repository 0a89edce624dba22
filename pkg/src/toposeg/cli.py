"""Batch command-line interface.

Exit codes: 0 success, 2 I/O failure, 3 invalid configuration or arguments,
4 numeric failure. JSON reports go to stdout, artifacts to files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import boxcount as bc
from . import formats
from .errors import InvalidConfig, NonFiniteLoss, UndefinedDimension

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("toposeg")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _emit(payload) -> None:
    sys.stdout.write(formats.json_text(payload) + "\n")


def _int_list(text: str, what: str) -> tuple[int, ...]:
    try:
        return formats.config_ints(text, what)
    except InvalidConfig as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def _scale_set(text: str) -> bc.ScaleSet:
    try:
        return bc.ScaleSet(_int_list(text, "scales"))
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def _read(reader, path):
    try:
        return reader(path)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from None


def _normalised_map(path) -> np.ndarray:
    """Grayscale file as a [1, 1, H, W] map in [0, 1], scaled by its own maximum."""
    raw = _read(formats.read_gray, path).astype(np.float64)
    top = raw.max(initial=0.0)
    m = raw / top if top > 0 else raw
    return m[None, None]


# -- subcommands -------------------------------------------------------------------


def cmd_augment(args) -> int:
    from .morph import AugConfig, apply_choice, sample_choice

    cfg = AugConfig.load(args.config) if args.config else AugConfig()
    img = _read(formats.read_rgb, args.inp)
    seed = cfg.seed if args.seed is None else args.seed
    choice = sample_choice(cfg, np.random.default_rng(seed))
    out = apply_choice(img, choice)
    try:
        formats.write_rgb(args.out, out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {exc}") from None
    _emit({**choice.as_dict(), "seed": seed})
    return EXIT_OK


def _format_count(v: float):
    return int(v) if float(v).is_integer() else float(v)


def _counts(args, m: np.ndarray, scales: bc.ScaleSet) -> np.ndarray:
    try:
        scales.check_extent(m.shape[2], m.shape[3])
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    if args.mode == "hard":
        return bc.hard_box_count_multiscale(m, scales)[0, 0].astype(np.float64)
    return bc.dbc_multiscale(m, scales).data[0, 0]


def cmd_boxcount(args) -> int:
    scales = _scale_set(args.scales)
    counts = _counts(args, _normalised_map(args.inp), scales)
    rows = ((0, 0, s, _format_count(n)) for s, n in zip(scales, counts))
    text = formats.csv_text(("batch", "channel", "scale", "count"), rows)
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot write {args.out}: {exc}") from None
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_fracdim(args) -> int:
    scales = _scale_set(args.scales)
    counts = _counts(args, _normalised_map(args.inp), scales)
    try:
        slope, r2 = bc.fractal_fit(counts, scales)
    except UndefinedDimension as exc:
        raise CliError(EXIT_NUMERIC, str(exc)) from None
    _emit(
        {
            "channel": 0,
            "scales": list(scales.sizes),
            "counts": [_format_count(n) for n in counts],
            "slope": float(slope),
            "r2": float(r2),
            "mode": args.mode,
        }
    )
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import THRESHOLD, run_suite

    results = run_suite(seed=args.seed, n_seeds=args.n_seeds)
    failed = [r.name for r in results if not r.passed]
    _emit({"threshold": THRESHOLD, "checks": [r.as_dict() for r in results], "failed": failed})
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_gen_corpus(args) -> int:
    from .pipeline.data import generate_corpus, save_corpus

    if args.n < 1:
        raise CliError(EXIT_CONFIG, "--n must be at least 1")
    scenes = generate_corpus(args.n, args.seed)
    try:
        save_corpus(scenes, args.out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write corpus to {args.out}: {exc}") from None
    hist = np.bincount(np.concatenate([s.labels.ravel() for s in scenes]), minlength=4)
    _emit({"scenes": args.n, "seed": args.seed, "out": str(args.out), "label_histogram": hist.tolist()})
    return EXIT_OK


def _load_corpus(path):
    from .pipeline.data import load_corpus

    try:
        return load_corpus(path)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot load corpus {path}: {exc}") from None


def _load_state(path):
    from .pipeline.model import ModelState

    arrays = _read(formats.load_checkpoint, path)
    try:
        return ModelState.from_arrays(arrays)
    except (KeyError, ValueError) as exc:
        raise CliError(EXIT_IO, f"{path}: malformed checkpoint ({exc})") from None


def _train_config(args):
    from dataclasses import replace

    from .pipeline.train import TrainConfig

    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {}
    for flag, key in (("epochs", "epochs"), ("seed", "seed"), ("lr", "lr"), ("batch_size", "batch_size")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    if args.no_topoaug:
        overrides["use_topoaug"] = False
    if args.topoaug_placement:
        overrides["placement"] = args.topoaug_placement
    if args.loss_terms:
        overrides["loss_terms"] = tuple(t.strip() for t in args.loss_terms.split(",") if t.strip())
    if args.no_dbc:
        overrides["use_dbc"] = False
    return replace(cfg, **overrides)


def cmd_train_toy(args) -> int:
    from .pipeline.data import generate_corpus
    from .pipeline.train import train_loop

    cfg = _train_config(args)
    corpus = _load_corpus(args.corpus) if args.corpus else generate_corpus(args.n, args.corpus_seed)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc}") from None
    result = train_loop(corpus, cfg)
    state = result.best_state or result.state
    try:
        (out / "metrics.csv").write_text(result.history_csv())
        (out / "steps.csv").write_text(result.steps_csv())
        (out / "config.txt").write_text(cfg.dumps())
        formats.save_checkpoint(out / "checkpoint.bin", state.arrays())
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write artifacts to {out}: {exc}") from None
    _emit({"epochs": cfg.epochs, "best_miou": result.best_miou if result.history else None, "out": str(out)})
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import confusion_matrix, metrics_from_confusion

    truth_scenes = _load_corpus(args.corpus)
    truth = np.stack([s.labels for s in truth_scenes])
    if args.checkpoint:
        from .pipeline.model import predict_batch

        state = _load_state(args.checkpoint)
        pred = np.concatenate([predict_batch(truth_scenes[i:i + 32], state) for i in range(0, len(truth_scenes), 32)])
        n_pred = state.n_classes
    else:
        pred = np.stack([s.labels for s in _load_corpus(args.pred)])
        n_pred = max(int(pred.max(initial=0)) + 1, args.classes)
    if pred.shape != truth.shape:
        raise CliError(EXIT_CONFIG, f"prediction shape {pred.shape} differs from truth {truth.shape}")
    n_true = max(int(truth.max(initial=0)) + 1, args.classes)
    m = metrics_from_confusion(confusion_matrix(pred, truth, n_pred, n_true))
    _emit(m.as_dict())
    return EXIT_OK


def cmd_infer(args) -> int:
    from .pipeline.model import infer

    state = _load_state(args.checkpoint)
    img = _read(formats.read_rgb, args.inp)
    labels = infer(img, state)
    try:
        formats.write_gray(args.out, labels, bits=8)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {exc}") from None
    _emit({"out": str(args.out), "label_histogram": np.bincount(labels.ravel(), minlength=state.n_classes).tolist()})
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="toposeg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("augment", help="apply one random lightness-morphology corruption to an image")
    a.add_argument("--in", dest="inp", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config", help="flat augmentation config (op_weights, p_apply, se_weights, seed)")
    a.add_argument("--seed", type=int, help="overrides the config seed")
    a.set_defaults(func=cmd_augment)

    for name, func, helptext in (
        ("boxcount", cmd_boxcount, "box counts of a grayscale map at several scales"),
        ("fracdim", cmd_fracdim, "box-counting dimension of a grayscale map"),
    ):
        b = sub.add_parser(name, help=helptext)
        b.add_argument("--in", dest="inp", required=True)
        b.add_argument("--scales", default="1,2,4,8")
        b.add_argument("--mode", choices=("hard", "soft"), default="hard")
        if name == "boxcount":
            b.add_argument("--out", help="CSV path (stdout when omitted)")
        b.set_defaults(func=func)

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op and loss term")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-seeds", type=int, default=10)
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("gen-corpus", help="write a synthetic scene corpus")
    c.add_argument("--n", type=int, default=200)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train-toy", help="train the toy model; writes checkpoint.bin, metrics.csv, steps.csv, config.txt")
    t.add_argument("--corpus", help="corpus directory (generated in memory when omitted)")
    t.add_argument("--n", type=int, default=200, help="scenes to generate without --corpus")
    t.add_argument("--corpus-seed", type=int, default=0)
    t.add_argument("--config", help="flat training config")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--no-topoaug", action="store_true")
    t.add_argument("--topoaug-placement", choices=("stu", "tea", "both"))
    t.add_argument("--loss-terms", help="comma-separated subset of con,dist,align,ref")
    t.add_argument("--no-dbc", action="store_true")
    t.set_defaults(func=cmd_train_toy)

    e = sub.add_parser("eval", help="Hungarian-matched accuracy and mIoU against a corpus")
    e.add_argument("--corpus", required=True, help="ground-truth corpus directory")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="predict with a trained model")
    src.add_argument("--pred", help="directory of predicted scene_XXXX_labels.pgm maps")
    e.add_argument("--classes", type=int, default=4)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="label map for one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--in", dest="inp", required=True)
    i.add_argument("--out", required=True, help="8-bit PGM/PNG label map")
    i.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except InvalidConfig as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UndefinedDimension as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(formats.json_text(exc.diagnostics), file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
