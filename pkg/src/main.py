# src/main.py

import argparse
import logging
import sys

import config

from components.eval_cmd import cmd_eval
from components.gen_data import cmd_gen_data
from components.profile_cmd import cmd_profile
from components.reconstruct_cmd import cmd_reconstruct
from components.train_cmd import cmd_train
from core.errors import FastVsrError

COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "profile": cmd_profile,
    "reconstruct": cmd_reconstruct,
}

# Subcommand flags are shorthands for --set on these keys.
SHORTHANDS = {
    "gen-data": {"count": "data.count", "dir": "data.dir"},
    "train": {"steps": "train.steps", "resume": "train.resume", "dir": "data.dir"},
    "eval": {"checkpoint": "eval.checkpoint", "methods": "eval.methods", "dir": "data.dir"},
    "profile": {"volume": "profile.volume", "strides": "profile.strides", "constants": "profile.constants"},
    "reconstruct": {"checkpoint": "reconstruct.checkpoint", "input": "reconstruct.input"},
}


def build_parser():
    parser = argparse.ArgumentParser(prog="fastvsr", description="Asymmetric-VAE video super-resolution toolkit")
    parser.add_argument("--config", help="YAML run configuration (nested or dotted keys)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="Output directory for run artifacts")
    parser.add_argument("--precision", choices=config.PRECISIONS)
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one config key, e.g. --set loss.lambda_b=0.1")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate the procedural HR/LR dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--dir")

    p = sub.add_parser("train", help="Pretrain the reference VAE, then train the f16 decoder with LBG")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="Checkpoint directory to resume from")
    p.add_argument("--dir")

    p = sub.add_parser("eval", help="PSNR / SSIM / warp error per clip against interpolation baselines")
    p.add_argument("--checkpoint")
    p.add_argument("--methods", type=lambda s: s.split(","), help=f"Comma-separated subset of {config.EVAL_METHODS}")
    p.add_argument("--dir")

    p = sub.add_parser("profile", help="Cost-model report for symmetric vs asymmetric pipelines")
    p.add_argument("--volume", help="T,H,W of the output video")
    p.add_argument("--strides", help="s_t,s_s of the VAE latent")
    p.add_argument("--constants", help="'calibrate' or a YAML file of codec constants")

    p = sub.add_parser("reconstruct", help="Super-resolve an LR clip with a trained checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--input", help=".fvsr container with a 'frames' entry")
    return parser


def resolve(args):
    updates = {key: getattr(args, flag) for flag, key in SHORTHANDS[args.command].items()
               if getattr(args, flag, None) is not None}
    return config.resolve_run_config(args.config, args.set, args.seed, args.out, args.precision, updates)


def main(argv=None):
    logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
    args = build_parser().parse_args(argv)
    try:
        resolved = resolve(args)
        return COMMANDS[args.command](resolved)
    except FastVsrError as e:
        logging.error(f"{args.command}: {e}")
        return 2
    except OSError as e:
        logging.error(f"{args.command}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
