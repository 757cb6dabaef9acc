"""``ssvae`` command line: train, eval, generate, gradcheck, probe-variance.

Exit codes: 0 success, 1 failed check, 2 configuration or data error,
3 checkpoint incompatible with the configured model.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import autodiff as ad
from .autodiff import RngStream
from .config import PROFILES, ConfigError, RunConfig
from .data import CorpusError, SplitError, Vocab, batch_iter
from .estimators import EstimatorConfig, estimator_variance_probe, write_probe_csv
from .gradcheck import format_table, run_gradcheck
from .model import SSVAE
from .nn import CheckpointError, load_checkpoint
from .training import RunData, evaluate, prepare_data, run_training

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_CHECKPOINT = 0, 1, 2, 3


class CheckpointMismatch(Exception):
    pass


# ---------------------------------------------------------------------------
# config assembly


def _add_config_flags(p: argparse.ArgumentParser, per_key: bool = True) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--profile", choices=sorted(PROFILES), help="preset model sizes applied before the file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    if not per_key:
        return
    g = p.add_argument_group("config keys (override the file)")
    for f in dataclasses.fields(RunConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar="V", default=None)


def build_config(args) -> RunConfig:
    base = RunConfig()
    if getattr(args, "profile", None):
        base = RunConfig.from_mapping(PROFILES[args.profile], base)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError("config", f"no such file {str(path)!r}")
        base = RunConfig.load(path, base)
    values = {}
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, "cfg_" + f.name, None)
        if v is not None:
            values[f.name] = v
    for item in getattr(args, "set", []):
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(item, "expected KEY=VALUE")
        values[key.strip()] = val.strip()
    cfg = RunConfig.from_mapping(values, base)
    for name in ("data_path", "test_path"):
        path = getattr(cfg, name)
        if path is not None and not Path(path).is_file():
            raise ConfigError(name, f"no such file {path!r}")
    return cfg


def load_run(run_dir, checkpoint=None) -> tuple[RunConfig, RunData, SSVAE]:
    """Rebuild config, data split and model from a training output directory."""
    run_dir = Path(run_dir)
    if not (run_dir / "config.txt").is_file():
        raise ConfigError("run_dir", f"{str(run_dir)!r} has no config.txt")
    cfg = RunConfig.load(run_dir / "config.txt")
    data = prepare_data(cfg)
    if (run_dir / "vocab.txt").is_file():
        data.vocab = Vocab.load(run_dir / "vocab.txt")
    model = SSVAE(cfg.model_config(len(data.vocab), data.n_classes), seed=cfg.seed)
    ckpt = Path(checkpoint) if checkpoint else run_dir / "best.ckpt"
    load_into(model, ckpt)
    return cfg, data, model


def load_into(model: SSVAE, path) -> None:
    arrays = load_checkpoint(path)
    missing = [k for k in model.params if k not in arrays]
    extra = [k for k in arrays if k not in model.params]
    if missing or extra:
        raise CheckpointMismatch(f"checkpoint {path}: missing {missing[:3]} unexpected {extra[:3]}")
    try:
        model.params.load(arrays)
    except ad.ShapeError as e:
        raise CheckpointMismatch(f"checkpoint {path}: {e}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = build_config(args)
    if args.dry_run:
        sys.stdout.write(cfg.to_text())
        return EXIT_OK
    out = cfg.output_dir or args.output
    res = run_training(cfg, out_dir=out, quiet=False)
    print(json.dumps(res.summary, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, data, model = load_run(args.run_dir, args.checkpoint)
    parts = {"train": data.split.labeled, "valid": data.split.valid, "test": data.split.test}
    out = {}
    for name in args.split:
        docs = parts[name]
        if not docs:
            out[name] = None
            continue
        r = evaluate(model, list(batch_iter(docs, data.vocab, 200, seed=None)), with_bound=True)
        out[name] = {"accuracy": r.accuracy, "mean_bound": r.mean_bound, "n": r.n}
    print(json.dumps(out, indent=2))
    return EXIT_OK


def _parse_labels(text: str, n_classes: int) -> list[int]:
    labels = [int(t) for t in text.split(",") if t.strip()]
    for y in labels:
        if not 0 <= y < n_classes:
            raise ConfigError("labels", f"label {y} outside [0, {n_classes})")
    return labels


def cmd_generate(args) -> int:
    from .diagnostics import generate

    cfg, data, model = load_run(args.run_dir, args.checkpoint)
    labels = _parse_labels(args.labels, model.cfg.n_classes)
    rng = RngStream(args.seed, (17,))
    L = model.cfg.latent
    shared = [rng.child(0, j).normal((L,)) for j in range(args.count)]
    w = sys.stdout
    for li, y in enumerate(labels):
        for j in range(args.count):
            z = shared[j] if args.paired else rng.child(1, li, j).normal((L,))
            ids = generate(model, y, z, args.mode, args.max_len, args.temperature, rng.child(2, li, j))
            w.write(f"{y}\t{j}\t{' '.join(data.vocab.decode(ids))}\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = run_gradcheck(seed=args.seed, eps=args.eps, n_coords=args.coords)
    print(format_table(rows))
    return EXIT_OK if all(r.ok for r in rows) else EXIT_CHECK


def cmd_probe_variance(args) -> int:
    if args.run_dir:
        cfg, data, model = load_run(args.run_dir, args.checkpoint)
    else:
        cfg = build_config(args)
        data = prepare_data(cfg)
        model = SSVAE(cfg.model_config(len(data.vocab), data.n_classes), seed=cfg.seed)
        if args.checkpoint:
            load_into(model, args.checkpoint)
    estimators = [EstimatorConfig.parse(e) for e in args.estimator]
    docs = data.split.unlabeled or data.split.labeled
    batch = next(batch_iter(docs, data.vocab, args.probe_batch, seed=args.draw_seed))
    rng = RngStream(args.draw_seed, (23,))
    noise = model.eval_noise(batch, rng.child(0))
    results, coords = [], None
    for est in estimators:
        r = estimator_variance_probe(
            model, batch, est, args.n, rng.child(1, len(results)), noise=noise, coords=coords,
            n_coords=args.coords, s1_c=args.s1_c,
        )
        coords = r.coords  # every estimator sees the same coordinates
        results.append(r)
    write_probe_csv(results, args.out or sys.stdout)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssvae", description="Semi-supervised sequential VAE experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write report.csv, checkpoints, summary.json")
    _add_config_flags(t)
    t.add_argument("--dry-run", action="store_true", help="validate and echo the config, then exit")
    t.add_argument("-o", "--output", help="output directory (same as --output-dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy and mean bound of a checkpoint, as JSON")
    e.add_argument("run_dir")
    e.add_argument("--checkpoint", help="defaults to RUN_DIR/best.ckpt")
    e.add_argument("--split", nargs="+", default=["test"], choices=["train", "valid", "test"])
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("generate", help="decode sentences from prior z for given labels")
    g.add_argument("run_dir")
    g.add_argument("--checkpoint")
    g.add_argument("--labels", default="0,1")
    g.add_argument("--count", type=int, default=5)
    g.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    g.add_argument("--paired", action="store_true", help="reuse the same z for every label")
    g.add_argument("--max-len", type=int, default=30)
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every component")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--coords", type=int, default=50, help="coordinates probed per parameter tensor")
    c.set_defaults(func=cmd_gradcheck)

    v = sub.add_parser("probe-variance", help="classifier-gradient estimator mean/variance as CSV")
    v.add_argument("run_dir", nargs="?", help="training output directory; omit to use a fresh model")
    v.add_argument("--checkpoint")
    v.add_argument("--estimator", nargs="+", default=["sample", "sample-s1", "sample-s2:2"])
    v.add_argument("--n", type=int, default=1000, help="label draws per estimator")
    v.add_argument("--coords", type=int, default=50)
    v.add_argument("--probe-batch", type=int, default=20, help="examples in the probed batch")
    v.add_argument("--s1-c", type=float, default=0.0, help="S1 baseline scale")
    v.add_argument("--draw-seed", type=int, default=0, help="seed for noise, coordinates and label draws")
    v.add_argument("--out", help="CSV path (default stdout)")
    _add_config_flags(v, per_key=False)
    v.set_defaults(func=cmd_probe_variance)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, CorpusError, SplitError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointMismatch, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
