"""Command-line entry point.

Every command reads ``--config <path>`` (optional) and accepts any config
key as ``--key value``. Exit status: 0 on success, 2 for contract or
dependency errors, 3 for data errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from . import pipeline
from .config import Config, load_config
from .errors import ConfigError, ContractError, DataError

COMMANDS = ("data-gen", "pretrain", "train-denoiser", "train-editor", "edit", "eval", "ablate")


def _overrides(rest: list[str]) -> dict[str, str]:
    """``--key value`` / ``--key=value`` pairs; a boolean key given alone means true."""
    flags = {f.name for f in fields(Config) if f.type == "bool"}
    out, i = {}, 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif key.replace("-", "_") in flags and (i + 1 >= len(rest) or rest[i + 1].startswith("--")):
            value = "true"
            i += 1
        else:
            if i + 1 >= len(rest):
                raise ConfigError(f"option --{key} needs a value")
            value = rest[i + 1]
            i += 2
        out[key] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regionedit",
        description="Instruction-driven image editing with a learned edit region.",
        epilog="Any config key may be given as --key value; see `regionedit <command> --help`.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "data-gen": "write the synthetic training corpus and the eval split with oracle edits",
        "pretrain": "train the contrastive encoders (and the auxiliary vision encoder)",
        "train-denoiser": "train the inpainting denoiser",
        "train-editor": "train the region predictor through the frozen sampler",
        "edit": "edit one PPM image with an instruction",
        "eval": "score the full edit path on the eval split",
        "ablate": "retrain and evaluate with each loss term removed",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--config", help="flat key = value config file")
        if name == "edit":
            p.add_argument("--image", required=True, help="source image (binary PPM)")
            p.add_argument("--instruction", required=True, help='e.g. "remove the red circle"')
            p.add_argument("--output", help="output path prefix (default <out_dir>/edits/<image stem>)")
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg: Config = load_config(args.config, _overrides(rest))
        cmd = args.command
        if cmd == "data-gen":
            print(pipeline.data_gen(cfg))
        elif cmd == "pretrain":
            print(pipeline.pretrain(cfg))
        elif cmd == "train-denoiser":
            print(pipeline.train_denoiser(cfg))
        elif cmd == "train-editor":
            print(pipeline.train_editor(cfg))
        elif cmd == "edit":
            print(json.dumps(pipeline.edit(cfg, args.image, args.instruction, args.output), sort_keys=True))
        elif cmd == "eval":
            print(json.dumps(pipeline.evaluate(cfg), indent=2, sort_keys=True))
        elif cmd == "ablate":
            for row in pipeline.ablate(cfg):
                print(json.dumps(row, sort_keys=True))
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
