"""Command line entry point.

Exit codes: 0 success, 1 configuration error, 2 at least one failed run.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness
from .config import CampaignConfig, ConfigError, load_config
from .metrics import ver, wer
from .models import CheckpointError, LanguageModel, VisualModel, load_checkpoint
from .synth import SpeechType, gen_dataset, load_dataset, save_dataset
from .training import by_type, max_length, predict_visemes
from .viseme_map import PAD

EXIT_OK, EXIT_CONFIG, EXIT_FAILED = 0, 1, 2


def _status(results) -> int:
    failed = [r for r in results if not r.ok]
    for r in failed:
        print(f"run failed: {r.spec} seed {r.seed}: {r.error}", file=sys.stderr)
    return EXIT_FAILED if failed else EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config) if args.config else CampaignConfig()
    ds = gen_dataset(cfg.gen)
    save_dataset(ds, args.out)
    print(f"wrote {sum(len(u) for _, u in ds)} utterances to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.spec)
    if cfg.loss is None:
        raise ConfigError("[loss] terms is required for train")
    spec = harness.ExperimentSpec(args.name or cfg.loss.label, cfg.loss, cfg.gen, cfg.train, cfg.visual,
                                  cfg.repeats, cfg.seeds, study="single")
    workers = args.workers or cfg.workers
    results = harness.run_experiment(spec, cfg.directory, cfg.language, cfg.lm_train, workers)
    for r in results:
        if r.ok:
            print(f"{r.spec} seed {r.seed}: VER {r.ver_normal:.4f}/{r.ver_silent:.4f} "
                  f"WER {r.wer_normal:.4f}/{r.wer_silent:.4f} (normal/silent)")
    return _status(results)


def cmd_eval(args) -> int:
    try:
        model = VisualModel.from_state(load_checkpoint(args.checkpoint))
        lm = LanguageModel.from_state(load_checkpoint(args.language)) if args.language else None
    except (OSError, CheckpointError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint: {exc}") from None
    try:
        ds = load_dataset(args.data)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load dataset: {exc}") from None
    L = max_length(ds)
    utts = ds.split(args.split)
    for stype in SpeechType:
        part = by_type(utts, stype)
        if not part:
            continue
        hyp = predict_visemes(model, part, L)
        line = f"{stype.value}: VER {ver([u.labels for u in part], hyp):.4f}"
        if lm is not None:
            words = lm.greedy([h if h else [PAD] for h in hyp]).words
            line += f" WER {wer([u.words for u in part], words):.4f}"
        print(f"{line} ({len(part)} utterances)")
    return EXIT_OK


def _campaign(args, runner, report: str) -> int:
    cfg = load_config(args.campaign)
    if args.workers:
        cfg = cfg.replace(workers=args.workers)
    results = runner(cfg)
    print((cfg.directory / report).read_text(), end="")
    return _status(results)


def cmd_report(args) -> int:
    directory = Path(args.campaign_dir)
    if not directory.is_dir():
        raise ConfigError(f"no such campaign directory: {directory}")
    results = harness.read_results(directory)
    if not results:
        raise ConfigError(f"no result.csv files under {directory}")
    for text in harness.write_reports(directory, results, (args.format,)).values():
        print(text, end="")
    return _status(results)


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors, not run failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="visememl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    g.add_argument("--config", help="INI file; only [gen] is used")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one loss configuration over the configured seeds")
    t.add_argument("--spec", required=True, help="INI file with a [loss] terms entry")
    t.add_argument("--name", help="run directory name (defaults to the loss label)")
    t.add_argument("--workers", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a visual checkpoint on a dataset directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--language", help="optional language-model checkpoint for WER")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.set_defaults(func=cmd_eval)

    for name, runner, text in (("table", harness.run_table_matrix, "run the 13-row loss ablation"),
                               ("sweep", harness.run_silent_sweep, "run the silent-data reduction sweep")):
        c = sub.add_parser(name, help=text)
        c.add_argument("--campaign", required=True)
        c.add_argument("--workers", type=int)
        c.set_defaults(func=lambda a, r=runner, n=name: _campaign(a, r, f"{n}.md"))

    r = sub.add_parser("report", help="rebuild reports from a campaign directory")
    r.add_argument("--campaign-dir", required=True)
    r.add_argument("--format", choices=("csv", "md"), default="md")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
