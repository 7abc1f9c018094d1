"""Build the bundled 5000-sample MNIST subset as gzipped IDX files.

The sandbox has no route to the MNIST mirrors, but the ``mlxtend`` wheel ships
5000 MNIST training images (500 per digit) as CSV. This script converts them
to ``data/mnist5k-{images-idx3,labels-idx1}-ubyte.gz``. Run once:

    pip download mlxtend --no-deps -d /tmp/mlx
    python scripts/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl
"""

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from ldppoison.data import write_idx

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("wheel", type=Path)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "data")
    args = ap.parse_args()

    with zipfile.ZipFile(args.wheel) as zf:
        text = gzip.decompress(zf.read(CSV_MEMBER))
    table = np.loadtxt(io.BytesIO(text), delimiter=",", dtype=np.int64)
    images = table[:, :-1].reshape(-1, 28, 28)
    labels = table[:, -1]
    assert images.min() >= 0 and images.max() <= 255

    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(images, labels,
              args.out / "mnist5k-images-idx3-ubyte.gz",
              args.out / "mnist5k-labels-idx1-ubyte.gz",
              compress=True)
    print(f"wrote {len(labels)} samples to {args.out}")


if __name__ == "__main__":
    main()
