"""``filterprune`` command line.

Exit codes: 0 success, 1 usage error, 2 data error. Payload goes to stdout
(JSON lines); diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .accounting import ModelSpec, PrunablePolicy, apply_policy, build_report, load_spec
from .criteria import Criterion, check_theta, score, select
from .sfp import PruneConfig, SfpSchedule, prunable_layer_names
from .tensor_store import ContainerError, as_filter_bank, read_container
from .toytrain import TOY_POLICY, SgdConfig, SyntheticDataset, run_sfp_experiment, toy_schedule

logger = logging.getLogger("filterprune")

EXIT_USAGE = 1
EXIT_DATA = 2


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _theta(text):
    try:
        return check_theta(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"theta must be in [0,1), got {text!r}") from None


def _seed(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _emit(obj):
    sys.stdout.write(json.dumps(obj) + "\n")


def _load(path):
    try:
        return read_container(path)
    except FileNotFoundError:
        raise DataError(f"weights file not found: {path}") from None
    except (ContainerError, OSError) as exc:
        raise DataError(f"cannot read weights {path}: {exc}") from None


def _policy(args, default=None):
    if not args.include and not args.exclude and default is not None:
        return default
    return PrunablePolicy(tuple(args.include or ["*"]), tuple(args.exclude or []))


def _selections(weights, names, criterion, theta):
    return {
        name: select(score(as_filter_bank(weights[name], name), criterion), theta) for name in names
    }


def cmd_score(args):
    weights = _load(args.weights)
    if args.layer is not None:
        if args.layer not in weights:
            raise DataError(f"layer {args.layer!r} not found in {args.weights}")
        names = [args.layer]
    else:
        names = [n for n, t in weights if len(t.shape) == 4]
    for name in names:
        try:
            bank = as_filter_bank(weights[name], name)
        except ValueError as exc:
            raise DataError(str(exc)) from None
        _emit(score(bank, args.criterion).to_json())


def cmd_select(args):
    weights = _load(args.weights)
    policy = _policy(args)
    if args.layer is not None:
        if args.layer not in weights:
            raise DataError(f"layer {args.layer!r} not found in {args.weights}")
        names = [n for n in prunable_layer_names(weights, policy) if n == args.layer]
    else:
        names = prunable_layer_names(weights, policy)
    if not names:
        raise DataError("no layer matches the prunable policy")
    try:
        sels = _selections(weights, names, args.criterion, args.theta)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    for sel in sels.values():
        _emit(sel.to_json())


def cmd_report(args):
    weights = _load(args.weights)
    try:
        spec = load_spec(args.spec)
    except FileNotFoundError:
        raise DataError(f"spec file not found: {args.spec}") from None
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"invalid spec {args.spec}: {exc}") from None
    spec = apply_policy(spec, _policy(args))
    for layer in spec.prunable_layers():
        if layer.name not in weights:
            raise DataError(f"spec layer {layer.name!r} missing from weights {args.weights}")
        if tuple(weights[layer.name].shape) != layer.shape:
            raise DataError(
                f"shape mismatch for {layer.name!r}: spec {list(layer.shape)},"
                f" weights {list(weights[layer.name].shape)}"
            )
    names = [layer.name for layer in spec.prunable_layers()]
    try:
        sels = _selections(weights, names, args.criterion, args.theta)
        report = build_report(spec, sels, PruneConfig(args.theta, args.criterion))
    except ValueError as exc:
        raise DataError(str(exc)) from None
    _emit(report.to_json())
    sys.stderr.write(report.to_table())
    if args.out:
        from pathlib import Path

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{spec.name}.report.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
        (out / f"{spec.name}.report.txt").write_text(report.to_table())


def cmd_sfp_run(args):
    base = toy_schedule()
    try:
        schedule = SfpSchedule(
            soft_epochs=args.soft_epochs,
            finetune_epochs=args.finetune_epochs,
            lr_initial=base.lr_initial,
            lr_steps=tuple(
                (round(e * args.soft_epochs / base.soft_epochs), f) for e, f in base.lr_steps
            ),
            finetune_lr=tuple(
                (round(o * args.finetune_epochs / base.finetune_epochs), r) for o, r in base.finetune_lr
            ),
        )
        config = PruneConfig(args.theta, args.criterion, _policy(args, TOY_POLICY), schedule)
        dataset = SyntheticDataset(args.seed, args.n_train, args.n_test)
    except ValueError as exc:
        raise DataError(f"invalid configuration: {exc}") from None
    result = run_sfp_experiment(config, dataset, SgdConfig(), seed=args.seed)
    paths = result.write(args.out, args.run)
    report = result.final_report
    _emit(
        {
            "run": args.run,
            "criterion": config.criterion.value,
            "theta": config.theta,
            "seed": args.seed,
            "final_accuracy": result.final_accuracy,
            "remaining_params": report.remaining_params,
            "real_sparsity": report.real_sparsity,
            "files": {k: str(v) for k, v in paths.items()},
        }
    )


def cmd_inspect(args):
    weights = _load(args.weights)
    total = 0
    for name, t in weights:
        total += t.size
        _emit({"layer": name, "shape": list(t.shape), "params": t.size, "conv": len(t.shape) == 4})
    spec = ModelSpec.from_container(weights)
    logger.info("%s: %d layers, %d parameters", spec.name, len(weights), total)


def build_parser():
    parser = _Parser(prog="filterprune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, need_theta=False, policy=False):
        p.add_argument("--weights", required=True, metavar="PATH")
        p.add_argument("--criterion", type=Criterion.parse, default=Criterion.FPGM,
                       metavar="{l1|fpgm}")
        if need_theta:
            p.add_argument("--theta", type=_theta, required=True, metavar="F")
        if policy:
            p.add_argument("--include", action="append", metavar="GLOB")
            p.add_argument("--exclude", action="append", metavar="GLOB")

    p = sub.add_parser("score", help="per-filter scores for 4-D layers")
    common(p)
    p.add_argument("--layer", metavar="NAME")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("select", help="filters to prune per prunable layer")
    common(p, need_theta=True, policy=True)
    p.add_argument("--layer", metavar="NAME")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("report", help="parameter count and real sparsity")
    common(p, need_theta=True, policy=True)
    p.add_argument("--spec", required=True, metavar="PATH")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sfp-run", help="toy soft filter pruning experiment")
    p.add_argument("--criterion", type=Criterion.parse, default=Criterion.FPGM, metavar="{l1|fpgm}")
    p.add_argument("--theta", type=_theta, default=0.5, metavar="F")
    p.add_argument("--seed", type=_seed, default=1, metavar="U64")
    p.add_argument("--out", default=".", metavar="DIR")
    p.add_argument("--run", default="toy", metavar="NAME", help="output file stem")
    p.add_argument("--include", action="append", metavar="GLOB")
    p.add_argument("--exclude", action="append", metavar="GLOB")
    p.add_argument("--soft-epochs", type=int, default=40)
    p.add_argument("--finetune-epochs", type=int, default=10)
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-test", type=int, default=256)
    p.set_defaults(func=cmd_sfp_run)

    p = sub.add_parser("inspect", help="list container layers")
    p.add_argument("--weights", required=True, metavar="PATH")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except DataError as exc:
        print(f"filterprune {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
