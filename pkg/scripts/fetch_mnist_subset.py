"""Build gzipped MNIST IDX files from the 5000-image MNIST subset that ships
inside the mlxtend wheel (500 images per digit, drawn from the MNIST training
set).  Per digit, the first 400 images become the "train" split and the last
100 the "t10k" split.

    python3 scripts/fetch_mnist_subset.py [--wheel PATH] [--out data/mnist]

Without --wheel the wheel is fetched with ``pip download``.  Point
NTKRECON_DATA at the parent of the output directory afterwards.
"""
import argparse
import gzip
import io
import struct
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def idx_bytes(arr: np.ndarray, magic: int) -> bytes:
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", n) for n in arr.shape)
    return header + arr.astype(np.uint8).tobytes()


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--wheel")
    p.add_argument("--out", default="data/mnist")
    p.add_argument("--train-per-class", type=int, default=400)
    args = p.parse_args(argv)
    wheel = args.wheel
    if wheel is None:
        tmp = tempfile.mkdtemp()
        subprocess.run([sys.executable, "-m", "pip", "download", "mlxtend==0.24.0", "--no-deps", "-d", tmp],
                       check=True)
        wheel = next(Path(tmp).glob("mlxtend-*.whl"))
    raw = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    images, labels = table[:, :-1], table[:, -1]
    train_idx, test_idx = [], []
    for c in range(10):
        members = np.flatnonzero(labels == c)
        train_idx.append(members[:args.train_per_class])
        test_idx.append(members[args.train_per_class:])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for prefix, idx in (("train", np.concatenate(train_idx)), ("t10k", np.concatenate(test_idx))):
        imgs = images[idx].reshape(-1, 28, 28)
        for name, blob in ((f"{prefix}-images-idx3-ubyte.gz", idx_bytes(imgs, 0x803)),
                           (f"{prefix}-labels-idx1-ubyte.gz", idx_bytes(labels[idx], 0x801))):
            # fixed mtime keeps the archive bytes reproducible
            with open(out / name, "wb") as fh, gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(blob)
        print(f"{prefix}: {len(idx)} images -> {out}")


if __name__ == "__main__":
    main()
