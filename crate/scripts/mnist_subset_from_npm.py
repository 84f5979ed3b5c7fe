"""Build the bundled MNIST subset from the `mnist` npm package.

Usage: npm pack mnist && tar xf mnist-*.tgz
       python3 scripts/mnist_subset_from_npm.py package/src/digits data/mnist-subset
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

TRAIN = 8000


def write_idx(path, dims, payload):
    header = struct.pack(">BBBB", 0, 0, 0x08, len(dims)) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + bytes(payload))


def main(src, dst):
    samples = []
    for digit in range(10):
        flat = json.loads((Path(src) / f"{digit}.json").read_text())["data"]
        for k in range(len(flat) // 784):
            pix = [max(0, min(255, round(v * 255))) for v in flat[k * 784:(k + 1) * 784]]
            samples.append((pix, digit))
    random.Random(0).shuffle(samples)
    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", samples[:TRAIN]), ("t10k", samples[TRAIN:])):
        write_idx(out / f"{name}-images-idx3-ubyte.gz", [len(part), 28, 28], [p for s in part for p in s[0]])
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", [len(part)], [s[1] for s in part])
        print(name, len(part))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
