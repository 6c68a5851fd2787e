"""Write a stratified MNIST train/test split as IDX files.

The 5000-image subset bundled with mlxtend is the only MNIST copy reachable
offline here; it is split 4000/1000 (400/100 per class) with a fixed seed.

    python3 scripts/make_mnist_idx.py --out data/mnist
"""
import argparse
from pathlib import Path

import numpy as np

from gevnet.data import stratified_subset, write_idx


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="data/mnist", help="output directory")
    ap.add_argument("--n-test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    from mlxtend.data import mnist_data

    X, y = mnist_data()
    X = X.reshape(-1, 28, 28).astype(np.uint8)
    y = y.astype(np.uint8)
    test = stratified_subset(y, args.n_test, args.seed)
    train = np.setdiff1d(np.arange(len(y)), test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte", X[train])
    write_idx(out / "train-labels-idx1-ubyte", y[train])
    write_idx(out / "t10k-images-idx3-ubyte", X[test])
    write_idx(out / "t10k-labels-idx1-ubyte", y[test])
    print(f"wrote {len(train)} train / {len(test)} test images to {out}")


if __name__ == "__main__":
    main()
