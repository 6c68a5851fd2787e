"""Command-line entry point: ``gevnet <subcommand> ...``.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import GevnetError
from .network import GeometryContext, cache_dir, cache_path, write_geometry_cache

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _emit(report: dict, out: str | None) -> None:
    text = json.dumps(report, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def _status(report: dict) -> int:
    return EXIT_OK if report["passed"] else EXIT_FAIL


def _mnist_path(args, key: str) -> Path:
    explicit = getattr(args, key)
    if explicit:
        return Path(explicit)
    base = Path(args.mnist_dir) / MNIST_FILES[key]
    gz = base.with_name(base.name + ".gz")
    return gz if not base.exists() and gz.exists() else base


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_geometry(args) -> int:
    out = args.out
    if out is None:
        d = cache_dir()
        out = cache_path(d if d else Path.cwd(), args.level)
    write_geometry_cache(out, args.level, args.Q)
    print(f"wrote level-{args.level} geometry cache (Q={args.Q}) to {out}")
    return EXIT_OK


def cmd_project_data(args) -> int:
    from .data import load_idx, prepare_datasets, save_datasets

    tr_x, tr_y = load_idx(_mnist_path(args, "train_images"), _mnist_path(args, "train_labels"))
    te_x, te_y = load_idx(_mnist_path(args, "test_images"), _mnist_path(args, "test_labels"))
    test_regime = args.test_regime or args.regime
    train, test = prepare_datasets(
        tr_x, tr_y, te_x, te_y, args.level, args.regime, test_regime, args.n_train, args.n_test, args.seed
    )
    out = args.out or f"mnist_L{args.level}_{args.regime}_{test_regime}_s{args.seed}.gevc"
    save_datasets(out, train, test, {"regime": args.regime, "test_regime": test_regime, "seed": args.seed})
    print(f"wrote {len(train)} train / {len(test)} test fields at level {args.level} to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import verify_all

    orders = (1, 2) if args.order is None else (args.order,)
    report = verify_all(orders, args.samples, args.seed, args.inject_corrupt_basis, args.instances)
    _emit(report, args.out)
    return _status(report)


def cmd_equivariance(args) -> int:
    from .train import load_checkpoint
    from .verify import equivariance_report

    net = None
    level = args.level
    if args.checkpoint:
        net, _ = load_checkpoint(args.checkpoint)
        level = net.arch.level if level is None else level
    report = equivariance_report(3 if level is None else level, args.seed, net, args.Q)
    _emit(report, args.out)
    return _status(report)


def cmd_gradcheck(args) -> int:
    from .verify import gradcheck_suite

    report = gradcheck_suite(args.seed)
    _emit(report, args.out)
    return _status(report)


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise argparse.ArgumentTypeError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for key in ("epochs", "lr", "seed", "dataset", "out_dir", "batch_size"):
        if getattr(args, key) is not None:
            out[key] = getattr(args, key)
    return out


def cmd_train(args) -> int:
    from .train import load_config, parse_config, train

    overrides = _overrides(args)
    cfg = load_config(args.config, overrides) if args.config else parse_config("", overrides)

    def log(row):
        print(json.dumps({k: (round(v, 6) if isinstance(v, float) else v) for k, v in row.items()}), flush=True)

    _, history = train(cfg, log=log)
    print(f"final test accuracy {history[-1]['test_acc']:.4f}; outputs in {cfg.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_datasets
    from .errors import ConfigError
    from .train import evaluate, load_checkpoint

    net, meta = load_checkpoint(args.checkpoint)
    train_set, test_set, _ = load_datasets(args.dataset)
    data = test_set if args.split == "test" else train_set
    if data.level != net.arch.level:
        raise ConfigError(f"dataset level {data.level} does not match checkpoint level {net.arch.level}")
    cfg = meta.get("config") or {}
    Q = args.Q or int(cfg.get("Q", 1000))
    acc, confusion = evaluate(net, GeometryContext(Q, cache=cache_dir()), data)
    report = {
        "schema_version": 1,
        "checkpoint": str(args.checkpoint),
        "split": args.split,
        "samples": len(data),
        "accuracy": acc,
        "confusion": confusion.tolist(),
    }
    _emit(report, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gevnet", description="Gauge-equivariant Volterra convolutions on icospheres.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("geometry", help="bake a geometry and stencil cache")
    g.add_argument("--level", type=int, required=True)
    g.add_argument("--out", help="output path (default: cache directory or current directory)")
    g.add_argument("--Q", type=int, default=1000, help="quadrature points per ring")
    g.set_defaults(func=cmd_geometry)

    d = sub.add_parser("project-data", help="project MNIST IDX files onto an icosphere")
    d.add_argument("--level", type=int, required=True)
    d.add_argument("--regime", choices=("NR", "R"), required=True)
    d.add_argument("--test-regime", choices=("NR", "R"))
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--mnist-dir", default="data/mnist")
    for key in MNIST_FILES:
        d.add_argument("--" + key.replace("_", "-"), dest=key)
    d.add_argument("--n-train", type=int, default=5000)
    d.add_argument("--n-test", type=int, default=1000)
    d.add_argument("--out")
    d.set_defaults(func=cmd_project_data)

    v = sub.add_parser("verify", help="steerability, oracle and planar-reduction suites")
    v.add_argument("--order", type=int, choices=(1, 2))
    v.add_argument("--samples", type=int, default=1000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--instances", type=int, default=20)
    v.add_argument("--out")
    v.add_argument("--inject-corrupt-basis", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("equivariance", help="gauge, icosahedral and generic-rotation suites")
    e.add_argument("--checkpoint")
    e.add_argument("--level", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--Q", type=int, default=1000)
    e.add_argument("--out")
    e.set_defaults(func=cmd_equivariance)

    c = sub.add_parser("gradcheck", help="central-difference checks for every layer kind")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--dataset")
    t.add_argument("--out-dir")
    t.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--split", choices=("train", "test"), default="test")
    ev.add_argument("--Q", type=int)
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (GevnetError, argparse.ArgumentTypeError) as exc:
        print(f"gevnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"gevnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
