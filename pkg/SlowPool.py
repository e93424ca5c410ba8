import argparse
import logging
import os
import sys
from typing import List, Optional, Tuple

from dotenv import load_dotenv

from helpers import (
    ConfigError,
    FormatError,
    NumericError,
    ShapeError,
    SlowPoolError,
    UnsupportedError,
    configure_logging,
    set_log_file,
    set_log_level,
    set_workers,
)
from data import SEQUENCE_KINDS, SequenceSpec, generate, load_sequence, normalize, save_sequence
from evaluation import evaluate, export_dictionary
from loss import Hyperparams, grad_check, random_check_instance
from train import OBJECTIVES, TrainConfig, load_checkpoint, save_checkpoint, train

# Load environment variables from .env file
load_dotenv()

# Process-level settings; hyperparameters only ever come from flags
if os.getenv('SLOWPOOL_WORKERS'):
    set_workers(int(os.getenv('SLOWPOOL_WORKERS')))
if os.getenv('SLOWPOOL_LOG_LEVEL'):
    set_log_level(os.getenv('SLOWPOOL_LOG_LEVEL'))
if os.getenv('SLOWPOOL_LOG_FILE'):
    set_log_file(os.getenv('SLOWPOOL_LOG_FILE'))

app_logger = logging.getLogger('SlowPool')

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

DEFAULTS = Hyperparams()


class UsageError(Exception):
    """Raised by the parser instead of exiting"""


class CommandParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _pair(text: str) -> Tuple[float, float]:
    """Parse 'dy,dx' into two floats"""
    parts = text.split(',')
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected dy,dx, got '{text}'")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two numbers, got '{text}'")


def _add_hyper_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--alpha', type=float, default=DEFAULTS.alpha, help="L1 weight")
    parser.add_argument('--beta', type=float, default=DEFAULTS.beta, help="slowness weight")
    parser.add_argument('--margin', type=float, default=DEFAULTS.margin, help="DrLIM margin m")
    parser.add_argument('--eps', type=float, default=DEFAULTS.eps, help="norm denominator guard")
    parser.add_argument('--p', type=float, default=DEFAULTS.p,
                        help="pooling norm order; gradients exist only for 2")


def build_parser() -> CommandParser:
    formatter = argparse.ArgumentDefaultsHelpFormatter
    parser = CommandParser(prog='SlowPool', formatter_class=formatter,
                           description="Slow, sparse pooled auto-encoders on frame pairs")
    commands = parser.add_subparsers(dest='command', required=True, metavar='COMMAND')

    gen = commands.add_parser('gen-data', formatter_class=formatter,
                              help="generate a synthetic sequence file")
    gen.add_argument('--kind', choices=SEQUENCE_KINDS, default='translating_blob',
                     help="sequence generator")
    gen.add_argument('--frames', type=int, default=64, help="frame count T")
    gen.add_argument('--size', type=int, default=16, help="frame height and width")
    gen.add_argument('--vel', type=_pair, default=(0.0, 1.0), help="velocity dy,dx per frame")
    gen.add_argument('--sigma', type=float, default=2.0, help="blob / texture smoothing sigma")
    gen.add_argument('--seed', type=int, default=0, help="texture / pattern seed")
    gen.add_argument('--out', required=True, help="sequence file to write")
    gen.set_defaults(handler=cmd_gen_data)

    tr = commands.add_parser('train', formatter_class=formatter, help="train a model")
    tr.add_argument('--data', required=True, help="sequence file")
    tr.add_argument('--objective', choices=OBJECTIVES, default='full',
                    help="reconstruction + sparsity + slowness, or contrastive only")
    _add_hyper_flags(tr)
    tr.add_argument('--lr', type=float, default=DEFAULTS.lr, help="learning rate")
    tr.add_argument('--momentum', type=float, default=DEFAULTS.momentum, help="momentum coefficient")
    tr.add_argument('--epochs', type=int, default=50, help="training epochs")
    tr.add_argument('--pairs-per-epoch', type=int, default=64, help="pairs sampled per epoch")
    tr.add_argument('--batch-size', type=int, default=16, help="pairs per SGD step")
    tr.add_argument('--neighbor-prob', type=float, default=0.5,
                    help="probability that a sampled pair is a temporal neighbor")
    tr.add_argument('--hidden', type=int, default=32, help="hidden units N")
    tr.add_argument('--group', type=int, default=4, help="pool group size")
    tr.add_argument('--stride', type=int, default=2, help="pool group stride")
    tr.add_argument('--seed', type=int, default=0, help="init and sampling seed")
    tr.add_argument('--out', required=True, help="checkpoint file to write")
    tr.add_argument('--report', default=None, help="optional per-epoch CSV file")
    tr.set_defaults(handler=cmd_train)

    ev = commands.add_parser('eval', formatter_class=formatter, help="score a model as a metric")
    ev.add_argument('--data', required=True, help="sequence file")
    ev.add_argument('--model', required=True, help="checkpoint file")
    ev.add_argument('--max-gap', type=int, default=5, help="largest gap in the distance profile")
    ev.add_argument('--norm', choices=('l1', 'l2'), default='l1', help="distance over pooled features")
    ev.add_argument('--p', type=float, default=DEFAULTS.p, help="pooling norm order")
    ev.set_defaults(handler=cmd_eval)

    gc = commands.add_parser('grad-check', formatter_class=formatter,
                             help="compare analytic and finite-difference gradients")
    gc.add_argument('--seed', type=int, default=0, help="instance seed")
    gc.add_argument('--dim', type=int, default=16, help="input dimension D")
    gc.add_argument('--hidden', type=int, default=24, help="hidden units N")
    gc.add_argument('--group', type=int, default=4, help="pool group size")
    gc.add_argument('--stride', type=int, default=2, help="pool group stride")
    gc.add_argument('--step', type=float, default=1e-5, help="finite-difference step")
    gc.add_argument('--threshold', type=float, default=1e-4, help="max relative error allowed")
    _add_hyper_flags(gc)
    gc.set_defaults(handler=cmd_grad_check)

    ex = commands.add_parser('export-dict', formatter_class=formatter,
                             help="write the decoder dictionary as a PGM image")
    ex.add_argument('--model', required=True, help="checkpoint file")
    ex.add_argument('--out', required=True, help="PGM file to write")
    ex.set_defaults(handler=cmd_export_dict)
    return parser


def cmd_gen_data(args) -> int:
    spec = SequenceSpec(kind=args.kind, T=args.frames, height=args.size, width=args.size,
                        velocity=args.vel, blob_sigma=args.sigma, seed=args.seed)
    seq = generate(spec)
    save_sequence(seq, args.out)
    print(f"sequence: {args.out}")
    print(f"frames: {seq.T}")
    print(f"height: {seq.height}")
    print(f"width: {seq.width}")
    return EXIT_OK


def cmd_train(args) -> int:
    seq = normalize(load_sequence(args.data))
    hyper = Hyperparams(alpha=args.alpha, beta=args.beta, margin=args.margin, eps=args.eps,
                        p=args.p, lr=args.lr, momentum=args.momentum)
    config = TrainConfig(epochs=args.epochs, pairs_per_epoch=args.pairs_per_epoch,
                         batch_size=args.batch_size, hyper=hyper, objective=args.objective,
                         neighbor_prob=args.neighbor_prob, seed=args.seed,
                         checkpoint_path=args.out, hidden=args.hidden,
                         group_size=args.group, stride=args.stride)
    params, report = train(seq, config)
    save_checkpoint(params, hyper, args.out)
    csv_text = report.to_csv()
    if args.report:
        with open(args.report, 'w', encoding='utf-8') as f:
            f.write(csv_text)
    sys.stdout.write(csv_text)
    app_logger.info(f"Wrote checkpoint {args.out} after {report.seconds:.1f}s")
    return EXIT_OK


def cmd_eval(args) -> int:
    seq = normalize(load_sequence(args.data))
    params, _ = load_checkpoint(args.model)
    report = evaluate(seq, params, max_gap=args.max_gap, norm=args.norm, p=args.p)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_grad_check(args) -> int:
    hyper = Hyperparams(alpha=args.alpha, beta=args.beta, margin=args.margin, eps=args.eps,
                        p=args.p)
    params, pair = random_check_instance(args.seed, args.dim, args.hidden, args.group, args.stride)
    result = grad_check(params, pair, hyper, args.step)
    print(f"max_rel_error: {result.max_rel_error:.6e}")
    print(f"checked: {result.checked}")
    print(f"excluded: {result.excluded}")
    if result.max_rel_error > args.threshold or result.excluded_fraction >= 0.05:
        app_logger.error(f"Gradient check failed: {result.max_rel_error:.3e} "
                         f"(threshold {args.threshold:g}), "
                         f"{result.excluded_fraction:.1%} coordinates excluded")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_export_dict(args) -> int:
    params, _ = load_checkpoint(args.model)
    pixels = export_dictionary(params, args.out)
    print(f"dictionary: {args.out}")
    print(f"width: {pixels.shape[1]}")
    print(f"height: {pixels.shape[0]}")
    return EXIT_OK


def run(argv: Optional[List[str]] = None) -> int:
    """Parse argv, dispatch one subcommand, and map failures to exit codes"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return int(e.code or 0)

    configure_logging()
    try:
        return args.handler(args)
    except (ConfigError, UnsupportedError) as e:
        app_logger.error(f"Invalid arguments: {e}")
        return EXIT_USAGE
    except (FormatError, ShapeError, OSError) as e:
        app_logger.error(f"Data error: {e}")
        return EXIT_DATA
    except NumericError as e:
        app_logger.error(f"Numeric failure: {e}")
        return EXIT_NUMERIC
    except SlowPoolError as e:
        app_logger.error(f"Unexpected error: {e}", exc_info=True)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
