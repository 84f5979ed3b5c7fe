"""Write the converter test fixtures.

Usage: python3 scripts/make_converter_fixtures.py crates/core/tests/fixtures/converter

Creates seeded checkpoints (lenet5-style, mlp2, a residual depthwise net and
one with an unsupported normalization op) and the archives converted from
the supported ones.
"""
import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))
import convert  # noqa: E402


def uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def conv(rng, arrays, name, k, cin, cout):
    arrays[f"{name}/kernel"] = uniform(rng, (k, k, cin, cout), cin * k * k)
    arrays[f"{name}/bias"] = uniform(rng, (cout,), cin * k * k)


def dense(rng, arrays, name, fin, fout):
    arrays[f"{name}/kernel"] = uniform(rng, (fin, fout), fin)
    arrays[f"{name}/bias"] = uniform(rng, (fout,), fin)


def node(name, op, inputs, **attrs):
    return {"name": name, "op": op, "inputs": inputs, "attrs": attrs}


def lenet5(rng):
    a = {}
    conv(rng, a, "conv1", 5, 1, 6)
    conv(rng, a, "conv2", 5, 6, 16)
    dense(rng, a, "fc1", 400, 120)
    dense(rng, a, "fc2", 120, 84)
    dense(rng, a, "fc3", 84, 10)
    nodes = [
        node("conv1", "Conv2D", ["input"], stride=1, padding=2),
        node("relu1", "ReLU", ["conv1"]),
        node("pool1", "MaxPool2D", ["relu1"], pool=2),
        node("conv2", "Conv2D", ["pool1"], stride=1, padding=0),
        node("relu2", "ReLU", ["conv2"]),
        node("pool2", "MaxPool2D", ["relu2"], pool=2),
        node("flatten", "Flatten", ["pool2"]),
        node("fc1", "Dense", ["flatten"]),
        node("relu3", "ReLU", ["fc1"]),
        node("fc2", "Dense", ["relu3"]),
        node("relu4", "ReLU", ["fc2"]),
        node("fc3", "Dense", ["relu4"]),
    ]
    return [1, 28, 28], nodes, a


def mlp2(rng):
    a = {}
    dense(rng, a, "fc1", 784, 64)
    dense(rng, a, "fc2", 64, 10)
    nodes = [node("fc1", "Dense", ["input"]), node("relu1", "ReLU", ["fc1"]), node("fc2", "Dense", ["relu1"])]
    return [784], nodes, a


def residual(rng):
    a = {}
    conv(rng, a, "stem", 3, 3, 8)
    a["dw/kernel"] = uniform(rng, (3, 3, 8), 9)
    a["dw/bias"] = uniform(rng, (8,), 9)
    conv(rng, a, "pw", 1, 8, 8)
    dense(rng, a, "fc", 8 * 4 * 4, 10)
    nodes = [
        node("stem", "Conv2D", ["input"], stride=1, padding=1),
        node("relu1", "ReLU", ["stem"]),
        node("dw", "DepthwiseConv2D", ["relu1"], stride=1, padding=1),
        node("pw", "Conv2D", ["dw"], stride=1, padding=0),
        node("add", "Add", ["pw", "relu1"]),
        node("pool", "AvgPool2D", ["add"], pool=2),
        node("flatten", "Flatten", ["pool"]),
        node("fc", "Dense", ["flatten"]),
    ]
    return [3, 8, 8], nodes, a


def with_batchnorm(rng):
    shape, nodes, a = lenet5(rng)
    nodes.insert(1, node("bn1", "BatchNormalization", ["conv1"]))
    nodes[2]["inputs"] = ["bn1"]
    return shape, nodes, a


def write_checkpoint(dst, build, seed):
    shape, nodes, arrays = build(np.random.default_rng(seed))
    dst.mkdir(parents=True, exist_ok=True)
    np.savez(dst / "weights.npz", **arrays)
    ckpt = {"input_shape": shape, "weights": "weights.npz", "nodes": nodes}
    (dst / "checkpoint.json").write_text(json.dumps(ckpt, indent=2) + "\n")
    return dst / "checkpoint.json"


def main(root):
    root = Path(root)
    for name, build, seed in [("lenet5", lenet5, 1), ("mlp2", mlp2, 2), ("residual", residual, 3)]:
        ckpt = write_checkpoint(root / f"{name}-checkpoint", build, seed)
        convert.convert(ckpt, root / f"{name}-archive", reference_batch=16, seed=seed)
    write_checkpoint(root / "batchnorm-checkpoint", with_batchnorm, 4)


if __name__ == "__main__":
    main(sys.argv[1])
