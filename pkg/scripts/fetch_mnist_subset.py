"""Build the desk-scale MNIST subset shipped in data/mnist/.

The source is the 5000-image MNIST sample (500 per class, label in the last
CSV column) bundled inside the mlxtend wheel.  The first 200 images of every
class become the training split and the last 100 the test split, written as
gzip-compressed IDX files.

    python3 scripts/fetch_mnist_subset.py [--wheel path/to/mlxtend.whl] [--out data/mnist]
"""
import argparse
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from afa.data.formats import write_idx  # noqa: E402

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def find_wheel(explicit):
    if explicit:
        return Path(explicit)
    tmp = Path(tempfile.mkdtemp())
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-d", str(tmp), "mlxtend"],
                   check=True)
    return next(tmp.glob("mlxtend-*.whl"))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--wheel")
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "mnist"))
    ap.add_argument("--train-per-class", type=int, default=200)
    ap.add_argument("--test-per-class", type=int, default=100)
    args = ap.parse_args(argv)

    with zipfile.ZipFile(find_wheel(args.wheel)) as zf:
        text = gzip.decompress(zf.read(MEMBER)).decode()
    table = np.loadtxt(io.StringIO(text), delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1].astype(np.uint8), table[:, -1]
    train, test = [], []
    for c in range(10):
        rows = np.flatnonzero(labels == c)
        if len(rows) < args.train_per_class + args.test_per_class:
            raise SystemExit(f"class {c}: only {len(rows)} images")
        train.append(rows[:args.train_per_class])
        test.append(rows[-args.test_per_class:])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, idx in (("train", np.concatenate(train)), ("t10k", np.concatenate(test))):
        write_idx(out / f"{name}-images-idx3-ubyte.gz", pixels[idx].reshape(-1, 28, 28))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", labels[idx].astype(np.uint8))
        print(f"{name}: {len(idx)} images")


if __name__ == "__main__":
    main()
