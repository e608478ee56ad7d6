"""Command-line driver: ``texp <command> [--seed N] [--config FILE] [--out DIR] [--set key=value ...]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing or malformed inputs).
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .classifier import ClassifierError, load_model, serve_batch
from .config import ConfigError, load_config, parse_override
from .pipeline import DATA_ERRORS, PipelineError, Workspace

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

STEPS = {
    "synth": ("generate the synthetic corpus, manifest and ground truth", pipeline.cmd_synth),
    "train-predictor": ("train the next-BBID predictor and calibrate its threshold", pipeline.cmd_train_predictor),
    "encode": ("encode every trace as images with provenance sidecars", pipeline.cmd_encode),
    "train-clf": ("split 0.8:0.2, train one classifier per encoder, report test accuracy", pipeline.cmd_train_clf),
    "explain": ("explain samples: explanation JSON, overlay image, region report", pipeline.cmd_explain),
    "validate": ("score explanations of malicious test samples", pipeline.cmd_validate),
    "run": ("every step in order", pipeline.cmd_run),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed (overrides the config file)")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key; repeatable, wins over --config",
    )
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="texp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (text, _) in STEPS.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text)
        if name == "explain":
            p.add_argument("sample_ids", nargs="*", metavar="SAMPLE_ID",
                           help="samples to explain (default: malicious test samples)")
    p = sub.add_parser(
        "predict-batch", help="answer one batch-file classifier request",
        description="Print one 'p_benign p_malicious' line per image path listed in LIST.",
    )
    p.add_argument("--model", required=True, help="classifier model file")
    p.add_argument("list", help="file with one image path per line")
    return parser


def _resolve_config(args):
    overrides = dict(parse_override(o) for o in args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    if args.command == "predict-batch":
        try:
            serve_batch(load_model(args.model), args.list)
        except (OSError, ClassifierError, *DATA_ERRORS, ValueError) as exc:
            print(f"texp: error: {exc}", file=sys.stderr)
            return EXIT_DATA
        return EXIT_OK

    try:
        config = _resolve_config(args)
    except ConfigError as exc:
        print(f"texp: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    ws = Workspace(args.out, config)
    _, step = STEPS[args.command]
    try:
        pipeline.write_run_json(ws, args.command, {"argv": list(argv if argv is not None else sys.argv[1:])})
        if args.command == "explain":
            summary = step(ws, args.sample_ids)
        else:
            summary = step(ws)
    except (PipelineError, *DATA_ERRORS) as exc:
        print(f"texp {args.command}: error: {_describe(exc)}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"texp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA

    if args.command in ("train-clf", "validate", "run"):
        print(pipeline.render_summary(summary), end="")
    return EXIT_OK


def _describe(exc):
    if isinstance(exc, FileNotFoundError) and exc.filename:
        return f"no such file: {exc.filename}"
    return str(exc)


if __name__ == "__main__":
    sys.exit(main())
