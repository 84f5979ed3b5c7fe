"""Convert a layer-graph checkpoint into a blockprune model archive.

Usage: python3 scripts/convert.py <checkpoint.json> --out <dir> [--reference-batch n] [--seed s]

A checkpoint is a JSON node list plus an .npz of named arrays:

    {"input_shape": [1, 28, 28], "weights": "weights.npz",
     "nodes": [{"name": "conv1", "op": "Conv2D", "inputs": ["input"],
                "attrs": {"filters": 6, "kernel": 5, "stride": 1, "padding": 2}}, ...]}

Activations are channels-first. Kernels follow the source convention:
Conv2D `(kh, kw, in, out)`, DepthwiseConv2D `(kh, kw, channels)`,
Dense `(in, out)`. They are rewritten to the archive's `(out, in, kh, kw)`,
`(channels, 1, kh, kw)` and `(out, in)` layouts.
"""
import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

FORMAT = "blockprune-archive"
FORMAT_VERSION = 1
TOOL_VERSION = "blockprune-convert 0.1.0"
SUPPORTED = {"Dense", "Conv2D", "DepthwiseConv2D", "ReLU", "MaxPool2D", "AvgPool2D", "Flatten", "Add"}


class ConversionError(Exception):
    pass


def out_size(size, kernel, stride, padding):
    span = size + 2 * padding
    if span < kernel:
        raise ConversionError(f"kernel {kernel} larger than padded input {span}")
    return (span - kernel) // stride + 1


def conv2d(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = out_size(h, kh, stride, padding), out_size(wd, kw, stride, padding)
    y = np.zeros((n, f, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            y += np.einsum("nchw,fc->nfhw", patch, w[:, :, i, j])
    return y + b[None, :, None, None]


def depthwise(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    _, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = out_size(h, kh, stride, padding), out_size(wd, kw, stride, padding)
    y = np.zeros((n, c, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            y += xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] * w[None, :, 0, i, j, None, None]
    return y + b[None, :, None, None]


def pool(x, kernel, stride, reduce):
    n, c, h, w = x.shape
    ho, wo = out_size(h, kernel, stride, 0), out_size(w, kernel, stride, 0)
    windows = [x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] for i in range(kernel) for j in range(kernel)]
    return reduce(np.stack(windows), axis=0)


def convert_graph(ckpt, arrays):
    """Returns (layers, params, shapes) in archive form; raises on any unsupported op."""
    unsupported = sorted({n["op"] for n in ckpt["nodes"] if n["op"] not in SUPPORTED})
    if unsupported:
        raise ConversionError("unsupported op(s): " + ", ".join(unsupported))
    layers = [{"id": "input", "kind": "input", "shape": list(ckpt["input_shape"]), "inputs": []}]
    index = {"input": 0}
    shapes = [tuple(ckpt["input_shape"])]
    params = {}
    for node in ckpt["nodes"]:
        name, op, attrs = node["name"], node["op"], node.get("attrs", {})
        if name in index:
            raise ConversionError(f"duplicate node name `{name}`")
        try:
            inputs = [index[i] for i in node["inputs"]]
        except KeyError as e:
            raise ConversionError(f"node `{name}` reads unknown tensor {e}") from None
        s = shapes[inputs[0]]
        layer = {"id": name, "inputs": inputs}
        if op == "Dense":
            k = arrays[f"{name}/kernel"]
            if len(s) != 1 or k.shape[0] != s[0]:
                raise ConversionError(f"`{name}`: kernel {k.shape} does not fit input {s}")
            layer.update(kind="fc", in_features=k.shape[0], out_features=k.shape[1])
            params[name] = (np.ascontiguousarray(k.T), arrays[f"{name}/bias"])
            out = (k.shape[1],)
        elif op == "Conv2D":
            k = arrays[f"{name}/kernel"]
            kh, kw, cin, cout = k.shape
            if len(s) != 3 or cin != s[0]:
                raise ConversionError(f"`{name}`: kernel {k.shape} does not fit input {s}")
            st, pad = attrs.get("stride", 1), attrs.get("padding", 0)
            layer.update(kind="conv2d", in_channels=cin, out_channels=cout, kernel_h=kh, kernel_w=kw,
                         stride=st, padding=pad)
            params[name] = (np.ascontiguousarray(k.transpose(3, 2, 0, 1)), arrays[f"{name}/bias"])
            out = (cout, out_size(s[1], kh, st, pad), out_size(s[2], kw, st, pad))
        elif op == "DepthwiseConv2D":
            k = arrays[f"{name}/kernel"]
            kh, kw, c = k.shape
            if len(s) != 3 or c != s[0]:
                raise ConversionError(f"`{name}`: kernel {k.shape} does not fit input {s}")
            st, pad = attrs.get("stride", 1), attrs.get("padding", 0)
            layer.update(kind="depthwise_conv2d", channels=c, kernel_h=kh, kernel_w=kw, stride=st, padding=pad)
            params[name] = (np.ascontiguousarray(k.transpose(2, 0, 1)[:, None]), arrays[f"{name}/bias"])
            out = (c, out_size(s[1], kh, st, pad), out_size(s[2], kw, st, pad))
        elif op == "ReLU":
            layer.update(kind="relu")
            out = s
        elif op in ("MaxPool2D", "AvgPool2D"):
            kern, st = attrs["pool"], attrs.get("stride", attrs["pool"])
            layer.update(kind="max_pool" if op == "MaxPool2D" else "avg_pool", kernel=kern, stride=st)
            out = (s[0], out_size(s[1], kern, st, 0), out_size(s[2], kern, st, 0))
        elif op == "Flatten":
            layer.update(kind="flatten")
            out = (int(np.prod(s)),)
        else:  # Add
            if len(inputs) != 2 or shapes[inputs[1]] != s:
                raise ConversionError(f"`{name}`: Add needs two inputs of equal shape")
            layer.update(kind="add")
            out = s
        index[name] = len(layers)
        layers.append(layer)
        shapes.append(out)
    return layers, params, shapes


def forward(layers, params, x):
    acts = [x.astype(np.float64)]
    for layer in layers[1:]:
        a = acts[layer["inputs"][0]]
        kind = layer["kind"]
        if kind == "fc":
            w, b = params[layer["id"]]
            y = a @ w.T.astype(np.float64) + b
        elif kind == "conv2d":
            w, b = params[layer["id"]]
            y = conv2d(a, w.astype(np.float64), b, layer["stride"], layer["padding"])
        elif kind == "depthwise_conv2d":
            w, b = params[layer["id"]]
            y = depthwise(a, w.astype(np.float64), b, layer["stride"], layer["padding"])
        elif kind == "relu":
            y = np.maximum(a, 0.0)
        elif kind == "max_pool":
            y = pool(a, layer["kernel"], layer["stride"], np.max)
        elif kind == "avg_pool":
            y = pool(a, layer["kernel"], layer["stride"], np.mean)
        elif kind == "flatten":
            y = a.reshape(a.shape[0], -1)
        else:
            y = a + acts[layer["inputs"][1]]
        acts.append(y)
    return acts[-1]


def sha256(data):
    return hashlib.sha256(data).hexdigest()


def convert(checkpoint, out_dir, reference_batch=16, seed=0):
    checkpoint = Path(checkpoint)
    ckpt = json.loads(checkpoint.read_text())
    arrays = dict(np.load(checkpoint.parent / ckpt["weights"]))
    ops = sorted({n["op"] for n in ckpt["nodes"]})
    report = {
        "source": str(checkpoint),
        "ops": ops,
        "mapped": sum(n["op"] in SUPPORTED for n in ckpt["nodes"]),
        "unmapped": sorted(n["name"] + ":" + n["op"] for n in ckpt["nodes"] if n["op"] not in SUPPORTED),
    }
    layers, params, _ = convert_graph(ckpt, arrays)

    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    tensors = []

    def write(tid, arr):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        (out / "tensors" / f"{tid}.bin").write_bytes(data)
        tensors.append({"id": tid, "kind": "f32", "shape": list(arr.shape), "bytes": len(data), "sha256": sha256(data)})

    for name, (w, b) in sorted(params.items()):
        write(f"{name}.weight", w.astype(np.float32))
        write(f"{name}.bias", b.astype(np.float32))

    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(reference_batch, *ckpt["input_shape"])).astype(np.float32)
    f32 = {k: (w.astype(np.float32), b.astype(np.float32)) for k, (w, b) in params.items()}
    y = forward(layers, f32, x).astype(np.float32)
    write("reference.input", x)
    write("reference.output", y)

    config = {"checkpoint": checkpoint.name, "reference_batch": reference_batch}
    manifest = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "input_shape": list(ckpt["input_shape"]),
        "layers": layers,
        "tensors": tensors,
        "reference": {"input": "reference.input", "output": "reference.output"},
        "provenance": {
            "tool_version": TOOL_VERSION,
            "seed": seed,
            "config_hash": sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()),
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    report["checksums"] = {t["id"]: t["sha256"] for t in tensors}
    report["reference_sample"] = {"input_shape": list(x.shape), "output_row0": y[0].tolist()}
    (out / "conversion_report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--reference-batch", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args(argv)
    try:
        report = convert(a.checkpoint, a.out, a.reference_batch, a.seed)
    except (ConversionError, KeyError) as e:
        print(json.dumps({"error": str(e).strip("'\"")}), file=sys.stderr)
        return 1
    print(json.dumps({k: report[k] for k in ("ops", "mapped", "unmapped")}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
