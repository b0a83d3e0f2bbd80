"""``dacl`` command line: gen-data, train, eval, dump-embeddings, selftest.

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 selftest
failure. ``DACL_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ABLATIONS, TrainConfig, apply_ablation, load_config, parse_value
from .cotrain import Trainer, embeddings_for, load_checkpoint, save_checkpoint
from .density import compactness_report
from .errors import ConfigError, DaclError, UndefinedMetricError
from .synthdata import SceneConfig, make_split, read_dataset, split_counts, write_dataset

log = logging.getLogger("dacl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_SELFTEST = 0, 2, 3, 4

TOGGLES = ("pcl_random_sampling", "single_scale", "no_bank", "uniform_w",
           "infonce_denominator", "negatives_from_all")


def _limit_threads():
    raw = os.environ.get("DACL_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DACL_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"DACL_THREADS must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _prepare_out(path, force):
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"{out} exists and is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_config(args):
    """Defaults < config file < --ablate < --set < dedicated flags."""
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = parse_value(key.strip(), raw)
    cfg = load_config(args.config)
    if getattr(args, "ablate", None):
        cfg = apply_ablation(cfg, args.ablate)
    cfg = cfg.replace(**overrides)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "iters", None) is not None:
        cfg = cfg.replace(iterations=args.iters)
    if getattr(args, "lambda_cl", None) is not None:
        cfg = cfg.replace(lambda_cl=args.lambda_cl)
    if getattr(args, "eval_every", None) is not None:
        cfg = cfg.replace(eval_every=args.eval_every)
    return cfg.validate()


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    if args.out is None:
        raise ConfigError("gen-data needs --out DIR")
    seed = args.seed if args.seed is not None else 0
    n_lab, n_unl, n_test = split_counts(args.scenes, args.labeled_frac)
    out = _prepare_out(args.out, args.force)
    split = make_split(args.scenes, args.labeled_frac, seed, SceneConfig())
    write_dataset(out, split, seed, args.labeled_frac)
    print(f"wrote {args.scenes} scenes to {out}: {n_lab} labeled / {n_unl} unlabeled / {n_test} test")
    return EXIT_OK


def cmd_train(args):
    cfg = _resolve_config(args)
    if args.data is None or args.out is None:
        raise ConfigError("train needs --data DIR and --out DIR")
    split = read_dataset(args.data)
    out = _prepare_out(args.out, args.force)
    started = time.time()
    trainer = Trainer(cfg, split)
    report = trainer.run(out / "train_log.jsonl", eval_every=cfg.eval_every)
    (out / "eval_report.json").write_text(report.to_json())
    save_checkpoint(out / "checkpoint.bin", trainer)
    (out / "config.cfg").write_text(cfg.to_text())
    manifest = {
        "build": f"dacl {__version__}",
        "config": cfg.to_text(),
        "config_digest": cfg.digest().hex(),
        "seed": cfg.seed,
        "ablation": args.ablate,
        "toggles": {k: getattr(cfg, k) for k in TOGGLES} | {"lambda_cl": cfg.lambda_cl},
        "data": str(Path(args.data).resolve()),
        "outputs": ["train_log.jsonl", "eval_report.json", "checkpoint.bin", "config.cfg"],
        "started": started,
        "finished": time.time(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    m = report.macro
    asd_txt = "n/a" if m["asd"] is None else f"{m['asd']:.2f}"
    print(f"t={trainer.t} dice={m['dice']:.2f} jaccard={m['jaccard']:.2f} asd={asd_txt}")
    return EXIT_OK


def _trainer_from_checkpoint(path, data):
    if not Path(path).is_file():
        raise DaclError(f"checkpoint {path} not found")
    text, _digest, t, states = load_checkpoint(path)
    from .config import parse_text

    cfg = TrainConfig(**parse_text(text)).validate()
    trainer = Trainer(cfg, read_dataset(data))
    for model, arrays in zip(trainer.models, states):
        model.load_state(arrays)
    trainer.t = t
    return trainer


def cmd_eval(args):
    if args.checkpoint is None or args.data is None:
        raise ConfigError("eval needs --checkpoint PATH and --data DIR")
    trainer = _trainer_from_checkpoint(args.checkpoint, args.data)
    report = trainer.evaluate()
    text = report.to_json()
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval_report.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def write_embeddings_csv(path, embeddings):
    d = len(embeddings[0].vector) if embeddings else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "class_id", "origin", "density"] + [f"dim_{i}" for i in range(d)])
        for e in embeddings:
            dens = "" if e.density is None else repr(float(e.density))
            w.writerow([e.scene_id, e.class_id, e.origin.value, dens]
                       + [repr(float(v)) for v in e.vector])


def read_embeddings_csv(path):
    from .density import ClassEmbedding, Origin

    out = []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows)
        n_dims = len(header) - 4
        for i, row in enumerate(rows):
            vec = np.array([float(x) for x in row[4:4 + n_dims]])
            dens = float(row[3]) if row[3] else None
            out.append(ClassEmbedding(vec, int(row[1]), dens, Origin(row[2]), seq_id=i,
                                      scene_id=int(row[0])))
    return out


def cmd_dump_embeddings(args):
    if args.checkpoint is None or args.data is None or args.out is None:
        raise ConfigError("dump-embeddings needs --checkpoint PATH, --data DIR and --out DIR")
    trainer = _trainer_from_checkpoint(args.checkpoint, args.data)
    embs = embeddings_for(trainer, trainer.split.test, trainer.config.phi)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings_csv(out / "embeddings.csv", embs)
    try:
        report = compactness_report(embs)
    except UndefinedMetricError as exc:
        report = {"undefined": str(exc)}
    (out / "compactness.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"{len(embs)} embeddings -> {out / 'embeddings.csv'}")
    for k in sorted(report):
        print(f"  {k}: {report[k]}")
    return EXIT_OK


def cmd_selftest(args):
    from .selftest import run_selftest

    results = run_selftest()
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_SELFTEST if failed else EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="dacl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        return p

    p = shared(sub.add_parser("gen-data", help="write a synthetic dataset"))
    p.add_argument("--scenes", type=int, default=100)
    p.add_argument("--labeled-frac", type=float, default=0.05)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = shared(sub.add_parser("train", help="co-train two models on a dataset"))
    p.add_argument("--data", help="dataset directory from gen-data")
    p.add_argument("--ablate", choices=sorted(ABLATIONS))
    p.add_argument("--lambda-cl", type=float, help="fixed contrastive weight (default: warm-up)")
    p.add_argument("--iters", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = shared(sub.add_parser("eval", help="evaluate a checkpoint on the test split"))
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_eval)

    p = shared(sub.add_parser("dump-embeddings", help="write test-split prototypes as CSV"))
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_dump_embeddings)

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _limit_threads():
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DaclError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
