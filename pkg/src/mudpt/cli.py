"""Command-line entry point.

Exit status: 0 success, 1 report-diff found differences or unexpected error,
2 invalid config or input, 3 numeric failure, 4 IO or checkpoint failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config, with_overrides
from .datagen import few_shot_sample, gen_corpus, write_corpus
from .encoders import DualEncoder
from .errors import CheckpointError, ConfigError, DataError, InvalidInputError, NumericError, ShapeError
from .numerics import grad_check
from .objective import tuning_loss
from .report import load_report, report_diff
from .runner import build_model, ensure_backbone, pretrain_backbone, run_experiment, save_backbone

EXIT_OK, EXIT_DIFF, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4
GRAD_TOLERANCE = 1e-3


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _load(args) -> ExperimentConfig:
    return with_overrides(load_config(args.config), seed=args.seed, out=args.out, mode=args.mode)


def cmd_run(args) -> int:
    report = run_experiment(_load(args))
    print((Path(report["config"]["output"]) / "report.txt").read_text(), end="")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    corpus = gen_corpus(cfg.data, seed=cfg.seed)
    path = out / "corpus.jsonl"
    write_corpus(corpus, path)
    print(f"wrote {len(corpus)} examples over {len(corpus.class_ids)} classes to {path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    backbone, info = pretrain_backbone(cfg)
    path = save_backbone(cfg, backbone, info)
    print(json.dumps({"checkpoint": str(path), **info}, sort_keys=True))
    return EXIT_OK


def grad_check_config(cfg: ExperimentConfig, pretrained: bool = False, batch: int = 8,
                      max_coords: int = 128) -> dict:
    """Finite-difference check of the tuning loss w.r.t. every trainable parameter of the first mode."""
    backbone = ensure_backbone(cfg) if pretrained else DualEncoder(cfg.backbone, seed=cfg.pretrain.seed)
    mode = cfg.modes[0]
    if mode == "zero_shot":
        raise ConfigError("grad-check needs a mode with trainable prompts")
    model = build_model(cfg, backbone, mode)
    corpus = gen_corpus(cfg.data, seed=cfg.seed)
    split = few_shot_sample(corpus, cfg.shots, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    idx = rng.choice(split.train_indices(), size=min(batch, len(split.train_indices())), replace=False)
    images, labels = corpus.fetch(idx)
    lookup = {c: k for k, c in enumerate(split.class_ids)}
    local = np.array([lookup[int(c)] for c in labels])
    names = corpus.class_sequences(split.class_ids)
    params = model.prompt_parameters()
    for p in params.values():
        p.requires_grad = True
    err = grad_check(lambda: tuning_loss(images, local, model, names), params, eps=1e-4,
                     max_coords=max_coords, seed=cfg.seed)
    return {"mode": mode, "max_rel_error": err, "coords_per_tensor": max_coords, "tolerance": GRAD_TOLERANCE,
            "parameters": {k: list(p.shape) for k, p in params.items()},
            "trainable_count": int(sum(p.data.size for p in params.values())),
            "passed": bool(err <= GRAD_TOLERANCE)}


def cmd_grad_check(args) -> int:
    result = grad_check_config(_load(args), pretrained=args.pretrained)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK if result["passed"] else EXIT_NUMERIC


def cmd_report_diff(args) -> int:
    lines = report_diff(load_report(args.a), load_report(args.b))
    for line in lines:
        print(line)
    if not lines:
        print("reports are identical (ignoring wall time)")
    return EXIT_DIFF if lines else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mudpt", description="Multi-modal deep prompt tuning on a synthetic world.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_overrides_args(p):
        p.add_argument("config", help="experiment config JSON")
        p.add_argument("--seed", type=_u64, help="override the root seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--mode", help="override the mode (comma-separated for several)")
        return p

    with_overrides_args(sub.add_parser("run", help="pretrain if needed, tune, evaluate, write reports")).set_defaults(fn=cmd_run)
    with_overrides_args(sub.add_parser("gen-data", help="write the synthetic corpus as JSONL")).set_defaults(fn=cmd_gen_data)
    with_overrides_args(sub.add_parser("pretrain", help="contrastively pretrain and save the backbone")).set_defaults(fn=cmd_pretrain)
    gc = with_overrides_args(sub.add_parser("grad-check", help="finite-difference check of the tuning gradients"))
    gc.add_argument("--pretrained", action="store_true", help="check against the pretrained backbone")
    gc.set_defaults(fn=cmd_grad_check)
    rd = sub.add_parser("report-diff", help="compare two report.json files")
    rd.add_argument("a")
    rd.add_argument("b")
    rd.set_defaults(fn=cmd_report_diff)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, DataError, InvalidInputError, ShapeError) as exc:
        print(f"error: invalid configuration or input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"error: IO failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
