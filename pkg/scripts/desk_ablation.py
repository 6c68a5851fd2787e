"""Desk-scale ablation: 2-layer GEVNet vs GENet over several seeds (NR/NR).

    python3 scripts/desk_ablation.py --mnist-dir data/mnist --out runs/desk_ablation.json
"""
import argparse
import json
from pathlib import Path

from gevnet.data import load_idx, prepare_datasets
from gevnet.train import DESK_SETTINGS, desk_ablation


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--mnist-dir", default="data/mnist")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--level", type=int, default=DESK_SETTINGS["level"])
    ap.add_argument("--out", default="runs/desk_ablation.json")
    args = ap.parse_args(argv)

    d = Path(args.mnist_dir)
    tr = load_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte")
    te = load_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte")
    train_set, test_set = prepare_datasets(*tr, *te, level=args.level)
    report = desk_ablation(train_set, test_set, seeds=range(args.seeds), level=args.level,
                           log=lambda r: print(json.dumps(r), flush=True))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    for name, m in report["models"].items():
        print(f"{name}: {m['params']} params, mean test error {m['mean_test_error']:.4f}")
    print(f"runtime {report['runtime_s']:.0f} s")


if __name__ == "__main__":
    main()
