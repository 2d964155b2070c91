"""Command-line entry point (``mctoken`` / ``python -m mctoken``).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
diverged (non-finite loss).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, DataError, DivergenceError, ExperimentConfig, load_config

log = logging.getLogger("mctoken")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. train.lr=1e-3 (repeatable)")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mctoken", description="Concept-token transformer toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    syn = sub.add_parser("synskin", help="synthetic dataset tools")
    syn_sub = syn.add_subparsers(dest="synskin_command", required=True, parser_class=_Parser)
    gen = syn_sub.add_parser("generate", help="generate a SynSkin dataset")
    _common(gen)
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--workers", type=int, default=1)

    tr = sub.add_parser("train", help="train a model (and evaluate it when train.test_data is set)")
    _common(tr)
    tr.add_argument("--seeds", help="comma-separated train seeds; runs once per seed")
    tr.add_argument("--resume", help="checkpoint to resume from")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _common(ev, config=False)
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--tau", type=float, nargs="+", help="Dice thresholds to sweep")
    ev.add_argument("--no-xai", action="store_true", help="skip selectivity and continuity")

    ex = sub.add_parser("explain", help="export localization maps and overlays")
    _common(ex, config=False)
    ex.add_argument("--ckpt", required=True)
    src = ex.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", nargs="+")
    src.add_argument("--data")

    ab = sub.add_parser("ablate", help="pooling x loss-setting grid")
    _common(ab)
    cp = sub.add_parser("compare", help="train and evaluate all model variants")
    _common(cp)
    return parser


def _config(args) -> ExperimentConfig:
    return load_config(getattr(args, "config", None), args.overrides)


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from exc
    if not seeds:
        raise ConfigError("--seeds is empty")
    return seeds


def run(args) -> int:
    from . import experiments
    from .synskin.dataset import generate_dataset

    out = Path(args.out)
    if args.command == "synskin":
        cfg = _config(args)
        if args.count < 0:
            raise ConfigError(f"--count must be >= 0, got {args.count}")
        man = generate_dataset(cfg.synskin, args.count, args.seed, out, workers=args.workers)
        experiments.write_run_json(out, cfg, "synskin generate", {"count": args.count, "seed": args.seed})
        log.info("wrote %d samples to %s", man["count"], out)
    elif args.command == "train":
        cfg = _config(args)
        echo = lambda line: log.info("%s", line)
        if args.seeds:
            rows = experiments.seed_runs(cfg, _seeds(args.seeds), out, log=echo)
            print(json.dumps(rows[-1]))
        elif args.resume:
            from .training import train
            experiments.write_run_json(out, cfg, "train --resume", {"resume": str(args.resume)})
            train(cfg, out, resume=args.resume, log=echo)
        else:
            result, payload = experiments.train_and_evaluate(cfg, out, log=echo)
            summary = {"best_epoch": result.best_epoch, "best_val_f1": result.best_val_f1,
                       "final_loss": result.final_loss}
            if payload:
                summary.update({k: payload["metrics"][k]["mean"] for k in ("acc", "auc", "f1", "dice")})
            print(json.dumps(summary))
    elif args.command == "eval":
        from .evaluation import evaluate_model, write_report
        from .synskin.dataset import load_dataset
        from .training import load_model

        model, cfg, _ = load_model(args.ckpt)
        cfg = ExperimentConfig.from_dict(_apply(cfg, args.overrides, args.tau))
        if not Path(args.data).is_dir():
            raise DataError(f"dataset directory not found: {args.data}")
        try:
            data = load_dataset(args.data)
        except (FileNotFoundError, ValueError) as exc:
            raise DataError(f"cannot load {args.data}: {exc}") from exc
        run_hash = experiments.write_run_json(out, cfg, "eval", {"checkpoint": str(args.ckpt),
                                                                 "data": str(args.data)})
        ev = evaluate_model(model, cfg, data, xai=not args.no_xai)
        payload = write_report(ev, out, Path(args.data).name, cfg.model.variant, run_hash)
        print(json.dumps({k: payload["metrics"][k]["mean"] for k in ("acc", "auc", "f1", "dice", "cl_score")}))
    elif args.command == "explain":
        from .training import load_model

        _, cfg, _ = load_model(args.ckpt)
        experiments.write_run_json(out, cfg, "explain", {"checkpoint": str(args.ckpt)})
        index = experiments.explain_checkpoint(args.ckpt, out, image_paths=args.image or (), data_dir=args.data)
        log.info("exported maps for %d images", len(index["images"]))
    elif args.command == "ablate":
        experiments.ablate(_config(args), out)
    elif args.command == "compare":
        experiments.compare(_config(args), out)
    return EXIT_OK


def _apply(cfg: ExperimentConfig, overrides, taus) -> dict:
    from .config import apply_overrides

    tree = apply_overrides(cfg.to_dict(), overrides)
    if taus:
        tree["eval"]["taus"] = list(taus)
    return tree


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            log.setLevel(logging.DEBUG)
        return run(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
