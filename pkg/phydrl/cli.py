import argparse
import logging
import sys

from dotenv import load_dotenv
from rich.logging import RichHandler

from phydrl.messages import ReportOutput
from phydrl.util.errors import ConfigError, Infeasible, NonFiniteLoss, PhyDrlError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2
EXIT_TRAINING_ABORT = 3
EXIT_BAD_CONFIG = 4

REPORT_TYPES = {
    "synth": "synthesis",
    "verify": "synthesis",
    "calibrate": "synthesis",
    "train": "training",
    "compare": "training",
    "eval": "evaluation",
    "analyze": "analysis",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Phy-DRL synthesis, training and verification toolkit.")

    subparsers = parser.add_subparsers(dest="command", help="Experiment commands.")
    subparsers.required = True

    def add_command(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", type=str, default=None, help="Path to a key=value config file.")
        sub.add_argument("--seed", type=int, default=None, help="Override experiment.seed.")
        sub.add_argument("--out", type=str, default=None, help="Output directory (default: experiment.out).")
        sub.add_argument("--verbose", action="store_true", default=False, help="Log at DEBUG level.")
        return sub

    # synth
    synth_parser = add_command("synth", "Solve the LMIs for the envelope and feedback gain.")
    synth_parser.add_argument(
        "--verify-only",
        action="store_true",
        default=False,
        help="Only verify the published envelope and gain.",
    )

    # verify
    verify_parser = add_command("verify", "Check a gain directory against the LMIs.")
    verify_parser.add_argument("--gain-dir", type=str, default=None, help="Directory with P.txt, F.txt, ...")
    verify_parser.add_argument(
        "--verify-only",
        action="store_true",
        default=False,
        help="Verify the published envelope and gain.",
    )

    # train
    train_parser = add_command("train", "Train the residual DDPG controller.")
    train_parser.add_argument("--gain-dir", type=str, default=None, help="Directory with P.txt, F.txt, ...")

    # eval / analyze
    for name, help_text in (
        ("eval", "Compare the model-based and Phy-DRL controllers on the friction plant."),
        ("analyze", "Check the safety and stability conditions of a trained policy."),
    ):
        sub = add_command(name, help_text)
        sub.add_argument("--checkpoint", type=str, required=True, help="Checkpoint written by train.")
        sub.add_argument("--gain-dir", type=str, default=None, help="Directory with P.txt, F.txt, ...")

    # compare
    compare_parser = add_command("compare", "Train the four reward/residual configurations and compare speed.")
    compare_parser.add_argument("--gain-dir", type=str, default=None, help="Directory with P.txt, F.txt, ...")

    # calibrate
    add_command("calibrate", "Fit plant parameters to the published linear model.")

    return parser


def setup_logging(verbose: bool) -> None:
    logger = logging.getLogger("phydrl")
    logger.handlers.clear()
    logger.addHandler(RichHandler(rich_tracebacks=verbose, show_path=verbose))
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False


def run(args: argparse.Namespace):
    from phydrl.experiment import commands
    from phydrl.experiment.config import load_config

    cfg = load_config(args.config, seed=args.seed)
    out_dir = args.out or cfg.experiment.out
    gain_dir = getattr(args, "gain_dir", None)

    if args.command == "synth":
        return commands.cmd_synth(cfg, out_dir, verify_only=args.verify_only)
    elif args.command == "verify":
        return commands.cmd_verify(cfg, out_dir, gain_dir=gain_dir, verify_only=args.verify_only)
    elif args.command == "train":
        return commands.cmd_train(cfg, out_dir, gain_dir=gain_dir)
    elif args.command == "eval":
        return commands.cmd_eval(cfg, out_dir, args.checkpoint, gain_dir=gain_dir)
    elif args.command == "analyze":
        return commands.cmd_analyze(cfg, out_dir, args.checkpoint, gain_dir=gain_dir)
    elif args.command == "compare":
        return commands.cmd_compare(cfg, out_dir, gain_dir=gain_dir)
    elif args.command == "calibrate":
        return commands.cmd_calibrate(cfg, out_dir)
    raise ValueError(f"Unknown command {args.command}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    load_dotenv()
    setup_logging(args.verbose)
    logger = logging.getLogger("phydrl.cli")

    try:
        result = run(args)
    except ConfigError as e:
        logger.error(f"Bad configuration: {e}")
        return EXIT_BAD_CONFIG
    except Infeasible as e:
        logger.error(f"Infeasible: {e}")
        return EXIT_INFEASIBLE
    except NonFiniteLoss as e:
        logger.error(f"Training aborted: {e}")
        return EXIT_TRAINING_ABORT
    except (PhyDrlError, FileNotFoundError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_ERROR

    ReportOutput(REPORT_TYPES[args.command], result.title, result.lines, result.columns, result.rows).cprint()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
