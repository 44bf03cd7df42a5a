"""Command-line interface.

Subcommands mirror the experiment pipeline: gen-data, train, align,
curve, bounds, attack, plane, report, sweep. Exit codes: 0 success,
2 config error, 3 missing artifact or hash mismatch, 4 numerical failure.
"""

import argparse
import sys

from . import experiment as exp
from .birkhoff import BvnError
from .io import ManifestError
from .nets import SpectralNormError, TrainingDivergedError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4


def build_parser():
    p = argparse.ArgumentParser(
        prog="modeconn",
        description="Mode connectivity of small nets under weight-permutation symmetry",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment config (JSON)")
        sp.add_argument("--out", required=True, help="artifact directory")
        sp.add_argument("--seed", type=int, default=None, help="override the experiment seed")
        sp.add_argument("--override", action="append", default=[], metavar="K=V",
                        help="dotted-path config override, repeatable")

    common(sub.add_parser("gen-data", help="generate the dataset CSV"))

    sp = sub.add_parser("train", help="train one endpoint model")
    common(sp)
    sp.add_argument("--tag", default="a", help="model tag (a, b, ...)")
    sp.add_argument("--robust", action="store_true", help="adversarial training")

    sp = sub.add_parser("align", help="compute the neuron alignment permutation")
    common(sp)
    sp.add_argument("--variant", default=None,
                    choices=["corr_post", "corr_pre", "l2_post", "l2_pre"])

    sp = sub.add_parser("curve", help="train a connecting curve")
    common(sp)
    sp.add_argument("--mode", required=True, choices=list(exp.CURVE_MODES))
    sp.add_argument("--robust", action="store_true", help="attack each batch during training")

    common(sub.add_parser("bounds", help="compute loss bounds for the model pair"))

    sp = sub.add_parser("attack", help="evaluate a model under PGD")
    common(sp)
    sp.add_argument("--tag", default="a")

    common(sub.add_parser("plane", help="loss/accuracy plane through theta1, theta2, P theta2"))

    sp = sub.add_parser("report", help="aggregate pair metrics into a summary table")
    sp.add_argument("--out", required=True, help="root directory containing pair*/ dirs")
    sp.add_argument("--pairing", default="tables", choices=["tables", "figures"])
    sp.add_argument("--robust", action="store_true")

    sp = sub.add_parser("sweep", help="grid over curve lr x batch size")
    common(sp)
    sp.add_argument("--pairs", type=int, default=1)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except exp.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (exp.MissingArtifactError, ManifestError, FileNotFoundError) as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDivergedError, SpectralNormError, BvnError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


def _dispatch(args):
    if args.command == "report":
        path = exp.stage_report(args.out, pairing=args.pairing, robust=args.robust)
        print(path)
        return EXIT_OK

    cfg = exp.load_config(args.config, args.override)
    if args.seed is not None:
        cfg["seed"] = args.seed

    if args.command == "gen-data":
        print(exp.stage_gen_data(cfg, args.out))
    elif args.command == "train":
        path, log = exp.stage_train(cfg, args.out, args.tag, robust=args.robust)
        if log:
            last = log[-1]
            print(f"{path} train_loss={last['train_loss']:.4f} "
                  f"train_acc={last['train_acc']:.4f}")
        else:
            print(path)
    elif args.command == "align":
        print(exp.stage_align(cfg, args.out, variant=args.variant))
    elif args.command == "curve":
        print(exp.stage_curve(cfg, args.out, args.mode, robust=args.robust))
    elif args.command == "bounds":
        report = exp.stage_bounds(cfg, args.out)
        print(f"B_u={report.B_u:.6f} B_a={report.B_a:.6f}")
    elif args.command == "attack":
        row = exp.stage_attack(cfg, args.out, tag=args.tag)
        print(f"clean_acc={row[1]:.4f} robust_acc={row[3]:.4f}")
    elif args.command == "plane":
        exp.stage_plane(cfg, args.out)
        print("plane.csv")
    elif args.command == "sweep":
        print(exp.stage_sweep(cfg, args.out, n_pairs=args.pairs))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
