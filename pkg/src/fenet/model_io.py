"""Single-file model serialization.

Layout: the magic bytes ``FENET1``, a big-endian uint32 header length, a
canonical JSON header (layer kinds and hyperparameters, input shape, class
count), then every parameter tensor in declared order as little-endian
float64, row-major. Round-trips are bit-exact.
"""

import json

import numpy as np

from .nn import Network, layer_from_header

MAGIC = b"FENET1"


class ModelFormatError(ValueError):
    """File is not a well-formed serialized model."""


def _header_dict(net: Network) -> dict:
    return {
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "layers": [layer.header() for layer in net.layers],
    }


def save_network(net: Network, path) -> None:
    header = json.dumps(_header_dict(net), sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header).to_bytes(4, "big"))
        f.write(header)
        for layer in net.layers:
            for p in layer.params:
                f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_network(path) -> Network:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic, not a model file")
    off = len(MAGIC)
    if len(blob) < off + 4:
        raise ModelFormatError(f"{path}: truncated header length")
    hlen = int.from_bytes(blob[off : off + 4], "big")
    off += 4
    if len(blob) < off + hlen:
        raise ModelFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[off : off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"{path}: unreadable header ({e})") from e
    off += hlen

    try:
        layers = [layer_from_header(h) for h in header["layers"]]
        input_shape = tuple(header["input_shape"])
        num_classes = header["num_classes"]
    except (KeyError, TypeError) as e:
        raise ModelFormatError(f"{path}: header missing field ({e})") from e

    # Bind shapes first so parameter sizes are known, then slice the blob.
    shape = input_shape
    for layer in layers:
        shape = layer.bind(shape)
    param_shapes = _param_shapes(layers, input_shape)
    for layer, shapes in zip(layers, param_shapes):
        arrays = []
        for s in shapes:
            n = int(np.prod(s)) if s else 1
            nbytes = n * 8
            if len(blob) < off + nbytes:
                raise ModelFormatError(
                    f"{path}: truncated parameters at byte {off} (need {nbytes} more)"
                )
            arrays.append(
                np.frombuffer(blob, dtype="<f8", count=n, offset=off)
                .astype(np.float64)
                .reshape(s)
            )
            off += nbytes
        _install_params(layer, arrays)
    if off != len(blob):
        raise ModelFormatError(f"{path}: {len(blob) - off} trailing bytes after parameters")
    return Network(layers, input_shape, num_classes)


def _param_shapes(layers, input_shape):
    shapes = []
    for layer in layers:
        kind = layer.kind
        if kind == "Dense":
            shapes.append([(layer.out_features, layer.in_shape[0]), (layer.out_features,)])
        elif kind == "Conv2D":
            c = layer.in_shape[2]
            shapes.append(
                [(layer.out_channels, c, layer.kh, layer.kw), (layer.out_channels,)]
            )
        else:
            shapes.append([])
    return shapes


def _install_params(layer, arrays):
    if arrays:
        layer.weight, layer.bias = arrays
