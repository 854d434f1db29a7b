"""Write the bundled 5,000-image MNIST sample as gzipped IDX files.

Source: ``mlxtend/data/data/mnist_5k.csv.gz`` from the mlxtend wheel
(500 images per class, drawn from the official MNIST distribution).
Usage: python scripts/build_mnist5k.py path/to/mlxtend-*.whl src/priot/data
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def main(wheel, out_dir):
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",", dtype=np.int64)
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out / "mnist5k-images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x803, len(images), 28, 28) + images.tobytes())
    with gzip.GzipFile(out / "mnist5k-labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x801, len(labels)) + labels.tobytes())


if __name__ == "__main__":
    main(*sys.argv[1:3])
