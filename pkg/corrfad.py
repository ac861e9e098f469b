#!/usr/bin/env python3
"""
CorrFaD command line

    corrfad.py synth  --out corpus --seed 7
    corrfad.py train  --corpus corpus --out bank.cfad
    corrfad.py detect --bank bank.cfad --corpus corpus --out detections.json
    corrfad.py eval repeated-setting --corpus corpus

Errors print one line, `error: <code>: <message>`, and exit non-zero:
2 for configuration errors, 3 for bank/corpus hash mismatches, 1 otherwise.
"""

import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from errors import ConfigConflictError, CorrFaDError, HashMismatchError
from settings import BACKENDS, EXPERIMENTS, LOCALIZATION_RULES, OVERLAP_MODES, RunConfig, get_settings

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_HASH_MISMATCH = 3


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON config file; flags override its values")
    common.add_argument("--workers", type=int, help="worker threads (default: CPU count)")
    common.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--sigma", type=float, help="goal-image Gaussian sigma in pixels")
    common.add_argument("--epsilon", type=float, help="explicit regularization epsilon")
    common.add_argument("--max-dim", dest="max_dim", type=int, help="largest correlation dimension")
    common.add_argument("--force", action="store_const", const=True,
                        help="proceed despite bank/corpus hash mismatches")
    common.add_argument("--no-progress", dest="progress", action="store_const", const=False,
                        help="hide progress bars")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="corrfad", description="MOSSE correlation filter face detection toolkit")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", parents=[common], help="generate a synthetic repeated-setting corpus")
    synth.add_argument("--out", help="output directory")
    synth.add_argument("--n-train", dest="n_train", type=int)
    synth.add_argument("--n-test", dest="n_test", type=int)
    synth.add_argument("--canvas", nargs=2, type=int, metavar=("WIDTH", "HEIGHT"))
    synth.add_argument("--iod-min", dest="iod_min", type=float)
    synth.add_argument("--iod-max", dest="iod_max", type=float)
    synth.add_argument("--octaves", nargs="+", type=float, help="render only these face octaves")
    synth.add_argument("--poses", nargs="+", type=float, help="render only these pose angles (degrees)")
    synth.add_argument("--noise", type=float)
    synth.add_argument("--background", choices=["stripes", "checker", "flat"])
    synth.add_argument("--clutter", type=int)

    train = commands.add_parser("train", parents=[common], help="train a filter bank")
    train.add_argument("--corpus", help="corpus directory (uses its train split)")
    train.add_argument("--annotations", help="annotation CSV instead of a corpus")
    train.add_argument("--octaves", nargs="+", type=float, help="grid octaves (default: 4.0..7.0 by 0.25)")
    train.add_argument("--poses", nargs="+", choices=["LEFT", "FRONTAL", "RIGHT"])
    train.add_argument("--crop", nargs=2, type=float, metavar=("HX", "HY"))
    train.add_argument("--out", help="bank file")

    detect = commands.add_parser("detect", parents=[common], help="detect faces with a bank")
    detect.add_argument("--bank")
    detect.add_argument("--corpus")
    detect.add_argument("--split", choices=["train", "test"])
    detect.add_argument("--annotations")
    detect.add_argument("--backend", choices=BACKENDS)
    detect.add_argument("-k", type=int, help="detections per image")
    detect.add_argument("--out", help="detections JSON")

    evaluate = commands.add_parser("eval", parents=[common], help="run an experiment")
    evaluate.add_argument("experiment", choices=EXPERIMENTS)
    evaluate.add_argument("--bank")
    evaluate.add_argument("--corpus")
    evaluate.add_argument("--annotations")
    evaluate.add_argument("--out-dir", dest="out_dir")
    evaluate.add_argument("--backend", choices=BACKENDS)
    evaluate.add_argument("--overlap-mode", dest="overlap_mode", choices=OVERLAP_MODES)
    evaluate.add_argument("--overlap-threshold", dest="overlap_threshold", type=float)
    evaluate.add_argument("--rule", choices=LOCALIZATION_RULES)
    evaluate.add_argument("--octave", type=float, help="filter octave for the scale sweep")
    evaluate.add_argument("--octaves", nargs="+", type=float, help="bank octaves for repeated-setting")
    evaluate.add_argument("--octave-span", dest="octave_span", type=float)
    evaluate.add_argument("--step", type=float)
    evaluate.add_argument("--n-per-step", dest="n_per_step", type=int)
    evaluate.add_argument("--allow-upsampling", dest="allow_upsampling", action="store_const", const=True)
    return parser


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    flags: Dict[str, Any] = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    configure_logging(flags.get("log_level") or get_settings().log_level)

    try:
        config = RunConfig.resolve(args.command, flags, args.config)
        logging.getLogger().setLevel(getattr(logging, str(config["log_level"]).upper(), logging.INFO))

        # Imported late so --help and config errors stay fast
        from pipeline import run_command
        result = run_command(config)
    except ConfigConflictError as e:
        print(f"error: {e.code}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except HashMismatchError as e:
        print(f"error: {e.code}: {e}", file=sys.stderr)
        return EXIT_HASH_MISMATCH
    except CorrFaDError as e:
        print(f"error: {e.code}: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except FileNotFoundError as e:
        print(f"error: file-not-found: {e}", file=sys.stderr)
        return EXIT_FAILURE

    logger.info(f"✅ {args.command} finished: {result}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
