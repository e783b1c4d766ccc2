"""Command line entry point: ``ifnd {synth,train,grid,metrics,dump}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .embedding import read_matrix, write_matrix
from .errors import ConfigError, IFNDError
from .harness import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_RUNTIME,
    ExperimentSpec,
    GridSpec,
    apply_override,
    load_config,
    load_dataset,
    pca_2d,
    preset,
    read_labels,
    run,
    run_grid,
    synth_blobs,
    write_labels,
)
from .losses import SINGLETON
from .metrics import mtnr, mtpr, nmi
from .trainer import EncoderParams, encode, load_checkpoint

log = logging.getLogger("ifnd")


def _resolve_config(args) -> dict:
    cfg = load_config(args.config) if args.config else {}
    for assignment in args.set or []:
        cfg = apply_override(cfg, assignment)
    return cfg


def cmd_synth(args) -> int:
    ds = synth_blobs(args.classes, args.per_class, args.dim, args.spread, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(ds.samples, out / "features.txt")
    write_labels(ds.true_label, out / "labels.txt")
    print(f"wrote {len(ds)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    spec = ExperimentSpec.from_config(_resolve_config(args), output_dir=args.out)
    outcome = run(spec, resume=args.resume)
    if outcome.status != EXIT_OK:
        print(f"error: {outcome.error}", file=sys.stderr)
        return outcome.status
    last = outcome.records[-1]
    print(f"{spec.name}: epoch {last.epoch} mtpr={last.mtpr:.4f} mtnr={last.mtnr:.4f} "
          f"nmi={last.nmi:.4f} probe_acc={last.probe_acc:.4f} -> {spec.output_dir}")
    return EXIT_OK


def cmd_grid(args) -> int:
    if args.preset:
        cfg = preset(args.preset)
        cfg["_base_dir"] = "."
    elif args.config:
        cfg = load_config(args.config)
    else:
        raise ConfigError("grid needs --config or --preset")
    for assignment in args.set or []:
        cfg = apply_override(cfg, assignment)
    out = Path(args.out or cfg.get("output_dir") or f"runs/{cfg.get('name', 'grid')}")
    grid = GridSpec.from_config(cfg, output_dir=out)
    rows = run_grid(grid, parallel_jobs=args.jobs, output_dir=out)
    failed = sum(r["status"] != "OK" for r in rows)
    print(f"{len(rows)} runs, {failed} failed; summary in {out / 'summary.csv'}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    truth = read_labels(args.true)
    if args.detected:
        detected = read_labels(args.detected)
    elif args.checkpoint:
        state = load_checkpoint(args.checkpoint)["state"]
        detected = state["levels"][args.level]["labels"]
    else:
        raise ConfigError("metrics needs --detected or --checkpoint")
    # each SINGLETON is its own cluster for NMI purposes
    top = max([int(v) for v in detected] + [0]) + 1
    clustered = [top + i if v == SINGLETON else int(v) for i, v in enumerate(detected)]
    result = {
        "mtpr": mtpr(truth, detected),
        "mtnr": mtnr(truth, detected),
        "nmi": nmi(truth, clustered),
    }
    print(json.dumps(result))
    return EXIT_OK


def cmd_dump(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    params = EncoderParams.from_dict(ckpt["params"])
    if args.features:
        x = read_matrix(args.features).values
    else:
        cfg = _resolve_config(args)
        x = load_dataset(cfg.get("dataset") or {}, Path(cfg.get("_base_dir", "."))).samples
    write_matrix(pca_2d(encode(params, x)), args.out)
    print(f"wrote 2-D embedding dump to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ifnd", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic Gaussian-blob dataset")
    s.add_argument("--classes", type=int, default=5)
    s.add_argument("--per-class", type=int, default=200)
    s.add_argument("--dim", type=int, default=2)
    s.add_argument("--spread", type=float, default=0.15)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="run one experiment")
    t.add_argument("--config", help="YAML run config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override, e.g. train.tau=0.5 (repeatable)")
    t.add_argument("--out", help="output directory (overrides config)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("grid", help="run an experiment grid")
    g.add_argument("--config", help="YAML grid config")
    g.add_argument("--preset", choices=["table6", "false-negatives"])
    g.add_argument("--set", action="append", metavar="KEY=VALUE")
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--out")
    g.set_defaults(func=cmd_grid)

    m = sub.add_parser("metrics", help="MTPR/MTNR/NMI of detected labels against true labels")
    m.add_argument("--true", required=True, help="true label file, one integer per line")
    m.add_argument("--detected", help="detected label file (-1 marks SINGLETON)")
    m.add_argument("--checkpoint", help="take detected labels from a checkpoint")
    m.add_argument("--level", type=int, default=0)
    m.set_defaults(func=cmd_metrics)

    d = sub.add_parser("dump", help="2-D principal-component dump of encoder features")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--features", help="feature matrix file; otherwise the config's dataset")
    d.add_argument("--config")
    d.add_argument("--set", action="append", metavar="KEY=VALUE")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, yaml.YAMLError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IFNDError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
