"""``earlyfusion`` command line.

Exit codes: 0 success, 1 failed gradient check, 2 usage or configuration
error, 3 I/O or file-format error, 4 training diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import FUSION_MODES, RunConfig, load_config
from .data import synth_dataset
from .errors import ConfigError, DivergenceError, FormatError, IoError, ParseError, ShapeError, UsageError

log = logging.getLogger("earlyfusion")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got {value!r}")
    return value == "on"


def _base_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    if getattr(args, "data", None) is not None:
        changes["data_dir"] = args.data
    return cfg.replace(**changes) if changes else cfg


def _train_overrides(cfg: RunConfig, args) -> RunConfig:
    mapping = {
        "aug": args.aug,
        "text": args.text,
        "fusion_mode": args.fusion,
        "epochs": args.epochs,
        "batch_size": args.batch,
        "lr": args.lr,
        "lam": args.lam,
    }
    return cfg.replace(**{k: v for k, v in mapping.items() if v is not None})


def cmd_synth(args) -> int:
    cfg = _base_config(args)
    if args.size is not None:
        cfg = cfg.replace(image_size=args.size)
    out = args.out or cfg.data_dir
    synth_dataset(
        cfg.synth_seed if args.seed is None else args.seed,
        cfg.n_train if args.n_train is None else args.n_train,
        cfg.n_val if args.n_val is None else args.n_val,
        cfg.n_test if args.n_test is None else args.n_test,
        cfg.image_size,
        out,
        cfg.distractor and not args.no_distractor,
        cfg.jitter,
    )
    log.info("wrote synthetic dataset to %s", out)
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train_run

    cfg = _train_overrides(_base_config(args), args)
    report = train_run(cfg)
    test = report["test"]
    print(json.dumps({"dice_mean": test["dice_mean"], "miou_mean": test["miou_mean"], "out": cfg.out_dir}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate

    result = evaluate(args.checkpoint, args.manifest)
    summary = {k: v for k, v in result.to_dict().items() if k != "per_image"}
    if args.out:
        path = Path(args.out)
        try:
            path.mkdir(parents=True, exist_ok=True)
            (path / "eval.json").write_text(json.dumps(result.to_dict(), indent=1))
        except OSError as exc:
            raise IoError(f"cannot write {path / 'eval.json'}: {exc}") from exc
    print(json.dumps(summary))
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .train import experiment_matrix

    cfg = _base_config(args)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    seeds = list(range(args.seeds)) if args.seed is None else [args.seed + i for i in range(args.seeds)]
    rows = experiment_matrix(cfg, seeds)
    for r in rows:
        print(f"{r['cell']:<26} dice {r['dice_mean']:.4f} +- {r['dice_std']:.4f}  miou {r['miou_mean']:.4f} +- {r['miou_std']:.4f}")
    return EXIT_OK


def cmd_dump_pseudo(args) -> int:
    from .train import dump_pseudo

    mean_iou = dump_pseudo(args.checkpoint, args.manifest, args.out)
    print(json.dumps({"mean_pseudo_iou": mean_iou, "out": args.out}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(0 if args.seed is None else args.seed)
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:<32} err={r.error:.3e} tol={r.tol:.0e}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON run configuration")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--out", help="output directory")
    shared.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    parser = argparse.ArgumentParser(prog="earlyfusion", description="Early text-image fusion for segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[shared], help="generate the synthetic grounded-shape dataset")
    p.add_argument("--size", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--no-distractor", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[shared], help="train one configuration and evaluate on the test split")
    p.add_argument("--data", help="dataset directory with train/test manifests")
    p.add_argument("--aug", type=_on_off, metavar="{on,off}")
    p.add_argument("--text", type=_on_off, metavar="{on,off}")
    p.add_argument("--fusion", choices=FUSION_MODES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[shared], help="evaluate a checkpoint on a manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", parents=[shared], help="run the ablation matrix and write matrix.csv")
    p.add_argument("--data", help="dataset directory (generated if missing)")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed (default 0)")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("dump-pseudo", parents=[shared], help="write pseudo-image PGMs and per-sample IoU")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_dump_pseudo)

    p = sub.add_parser("gradcheck", parents=[shared], help="run the finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    if args.command == "dump-pseudo" and not args.out:
        print("earlyfusion: dump-pseudo needs --out", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"earlyfusion: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (IoError, FormatError) as exc:
        print(f"earlyfusion: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, ParseError, ShapeError) as exc:
        print(f"earlyfusion: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
