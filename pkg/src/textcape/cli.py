"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data/schema
error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from .config import DATA_ENV, PRESETS, ConfigError, load_config
from .datasets import DatasetError, load_dataset
from .embedders import EmbeddingError
from .posegraph import PoseGraphError
from .synthetic import SyntheticError, SyntheticSpec, synth_generate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
DATA_ERRORS = (DatasetError, PoseGraphError, SyntheticError, EmbeddingError, FileNotFoundError)

log = logging.getLogger("textcape")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _data_root(args, fallback: str | None = None) -> Path:
    root = args.data_root or os.environ.get(DATA_ENV) or fallback
    if not root:
        raise UsageError(f"no dataset root: pass --data-root or set ${DATA_ENV}")
    return Path(root)


def _load_for_checkpoint(args):
    from .training import load_checkpoint
    model, config, _ = load_checkpoint(args.checkpoint)
    root = _data_root(args, config.data_root)
    return model, load_dataset(root, max_keypoints=config.model.max_keypoints)


def _emit(obj, path: str | None = None):
    text = json.dumps(obj, indent=1)
    if path:
        Path(path).write_text(text + "\n")
    print(text)


def cmd_train(args) -> int:
    from .training import train
    overrides = list(args.set or [])
    if args.data_root:
        overrides.append(f"data_root={args.data_root}")
    config = load_config(args.config, args.preset, overrides)
    root = config.resolved_data_root()
    dataset = load_dataset(root, max_keypoints=config.model.max_keypoints)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config.data_root = str(root)
    (out / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
    result = train(config, dataset, log_path=out / "metrics.jsonl",
                   checkpoint_path=out / "checkpoint.pt")
    last = result.metrics[-1]
    print(json.dumps({"checkpoint": str(out / "checkpoint.pt"), **last}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import center_predictor, evaluate
    model, dataset = _load_for_checkpoint(args)
    report = evaluate(model, args.split, dataset, args.threshold)
    if args.baseline:
        report["center_baseline_pck"] = evaluate(model, args.split, dataset, args.threshold,
                                                 predictor=center_predictor)["mean_pck"]
    _emit(report, args.out)
    return EXIT_OK


def cmd_mask_sweep(args) -> int:
    from .evaluation import mask_sweep
    model, dataset = _load_for_checkpoint(args)
    if any(not 0 <= f <= 1 for f in args.fractions):
        raise UsageError("mask fractions must lie in [0, 1]")
    rows = mask_sweep(model, args.fractions, dataset, args.seed, args.split, args.threshold,
                      out_csv=args.out)
    print("fraction,mean_pck")
    for f, p in rows:
        print(f"{f},{p}")
    return EXIT_OK


def cmd_robustness(args) -> int:
    from .evaluation import robustness
    model, dataset = _load_for_checkpoint(args)
    table = args.synonyms
    if "synonym" in args.modes and table is None:
        from .perturb import load_synonym_table
        table = load_synonym_table()
    result = robustness(model, args.modes, dataset, args.seed, table, args.split,
                        args.threshold, out_dir=args.out)
    _emit({k: v for k, v in result.items() if k != "displacements"})
    return EXIT_OK


def cmd_synth_gen(args) -> int:
    spec = SyntheticSpec(seed=args.seed, n_categories=args.categories,
                         samples_per_category=args.samples, image_size=args.image_size,
                         n_val=args.val, n_test=args.test, max_keypoints=args.max_keypoints)
    if spec.n_train < 1:
        raise UsageError("need at least one training category")
    split = synth_generate(spec, args.out)
    print(json.dumps(split.to_json()))
    return EXIT_OK


def cmd_validate_data(args) -> int:
    ds = load_dataset(_data_root(args), max_keypoints=args.max_keypoints, check_images=True)
    summary = {name: {"categories": len(ds.categories(name)),
                      "samples": len(ds.split_samples(name))} for name in ("train", "val", "test")}
    print(json.dumps({"root": str(ds.root), "samples": len(ds), "splits": summary}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="textcape", description="Text-graph keypoint localization harness.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_opt(sp):
        sp.add_argument("--data-root", help=f"dataset root (default: ${DATA_ENV})")

    def ckpt_opts(sp):
        sp.add_argument("--checkpoint", required=True)
        data_opt(sp)
        sp.add_argument("--split", choices=["val", "test"], default="test")
        sp.add_argument("--threshold", type=float, default=0.2)
        sp.add_argument("--out")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="YAML config file")
    t.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, e.g. model.decoder_kind=mlp")
    t.add_argument("--out", required=True, help="run directory")
    data_opt(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PCK report for a checkpoint")
    ckpt_opts(e)
    e.add_argument("--baseline", action="store_true", help="also report the center baseline")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("mask-sweep", help="PCK under query occlusion")
    ckpt_opts(m)
    m.add_argument("--fractions", type=_floats, default=[0.0, 0.1, 0.25, 0.5])
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_mask_sweep)

    r = sub.add_parser("robustness", help="PCK and displacement under text perturbations")
    ckpt_opts(r)
    r.add_argument("--modes", type=lambda s: s.split(","), default=["synonym", "typo"])
    r.add_argument("--synonyms", help="synonym table (default: the packaged table)")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_robustness)

    s = sub.add_parser("synth-gen", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--categories", type=int, default=12)
    s.add_argument("--samples", type=int, default=100)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--val", type=int, default=2)
    s.add_argument("--test", type=int, default=2)
    s.add_argument("--max-keypoints", type=int, default=20)
    s.set_defaults(func=cmd_synth_gen)

    v = sub.add_parser("validate-data", help="check a dataset root against the schema")
    data_opt(v)
    v.add_argument("--max-keypoints", type=int, default=100)
    v.set_defaults(func=cmd_validate_data)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .training import DivergenceError
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"textcape: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"textcape: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DATA_ERRORS as exc:
        print(f"textcape: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
