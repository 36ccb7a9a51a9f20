"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import evaluation, extract, gct, kg, runner
from .cohort import CohortError
from .config import ConfigError, RunConfig, config_from_dict, load_config
from .kg import GraphError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, out=True):
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--seed", type=int, help="override the config seed")
    if out:
        p.add_argument("--out", help="output directory (default: output.directory)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgroundtrip", description="Knowledge-graph round trip through a GCT")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write synthetic KG, cohort and conditional table")
    _common(p)

    p = sub.add_parser("train", help="train one loss mode on a cohort file")
    _common(p)
    p.add_argument("--cohort", required=True)
    p.add_argument("--loss-mode", choices=gct.LOSS_MODES)

    p = sub.add_parser("extract", help="recover a KG from a checkpoint's attention")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--layer", type=int)
    p.add_argument("--mode", choices=("greedy", "threshold"))
    p.add_argument("--tau", type=float)
    p.add_argument("--max-hops", type=int)
    p.add_argument("--beam-width", type=int)
    p.add_argument("--output-file", default="recovered.jsonl", help="file name inside --out")

    p = sub.add_parser("evaluate", help="score a recovered graph against the truth")
    _common(p)
    p.add_argument("--kg", required=True)
    p.add_argument("--recovered", required=True)
    p.add_argument("--match-floor", type=float)

    p = sub.add_parser("roundtrip", help="generate, train both modes, extract, score, compare")
    _common(p)

    p = sub.add_parser("report", help="compare a modified-mode and an original-mode report CSV")
    _common(p)
    p.add_argument("--modified", required=True)
    p.add_argument("--original", required=True)
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    return cfg


def _out(args, cfg: RunConfig) -> Path:
    return Path(getattr(args, "out", None) or cfg.output.directory)


def _print_kv(d):
    for k, v in d.items():
        print(f"{k}: {v}")


def run(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    cmd = args.command

    if cmd == "generate":
        _print_kv(runner.generate(cfg, out))

    elif cmd == "train":
        try:
            _, report = runner.train(cfg, args.cohort, out, args.loss_mode)
        except gct.TrainingDiverged as exc:
            print(f"training diverged at step {exc.step}; partial report kept", file=sys.stderr)
            return EXIT_RUNTIME
        print(evaluation.format_table(report))

    elif cmd == "extract":
        e = cfg.extract
        for opt, attr in (("layer", "layer"), ("mode", "mode"), ("tau", "tau"),
                          ("max_hops", "max_hops"), ("beam_width", "beam_width")):
            if getattr(args, opt) is not None:
                setattr(e, attr, getattr(args, opt))
        model = gct.load_checkpoint(args.checkpoint)
        if e.layer is not None and not 1 <= e.layer <= model.cfg.num_blocks:
            raise ConfigError(f"--layer must lie in 1..{model.cfg.num_blocks}")
        runner.ensure_dir(out)
        rg = runner.run_extract(cfg, args.checkpoint, args.cohort, out / args.output_file)
        print(f"recovered pairs: {len(rg.best)}")

    elif cmd == "evaluate":
        floor = cfg.extract.match_floor if args.match_floor is None else args.match_floor
        score = evaluation.score_recovery(kg.load_kg(args.kg), extract.load_recovered(args.recovered), floor)
        runner.ensure_dir(out)
        runner.write_recovery(score, out / "recovery.txt")
        _print_kv(score.as_dict())

    elif cmd == "report":
        mod = evaluation.read_report_csv(args.modified)
        orig = evaluation.read_report_csv(args.original)
        print("modified loss\n" + evaluation.format_table(mod))
        print("original loss\n" + evaluation.format_table(orig))
        summary = evaluation.compare_runs(mod, orig)
        runner.ensure_dir(out)
        evaluation.write_summary(summary, out / runner.COMPARISON_FILE)
        _print_kv({k: v for k, v in summary.items() if not isinstance(v, list)})

    elif cmd == "roundtrip":
        res = runner.roundtrip(cfg, out)
        comp = res["comparison"]
        for mode in ("original", "modified"):
            s = res[mode]
            print(f"{mode}: edge_f1={s['edge_f1']!r} relation_accuracy={s['relation_accuracy']!r}")
        print(f"mean_loss_ratio={comp['mean_loss_ratio']!r} "
              f"finding_loss_below_10pct={comp['finding_loss_below_10pct']}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GraphError, CohortError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
