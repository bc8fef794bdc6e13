"""Single-file checkpoints.

Layout::

    b"DVNETCKP"                 8-byte magic
    uint32 LE                   format version
    uint64 LE                   manifest length in bytes
    manifest                    UTF-8 JSON: version, config (key=value text),
                                tensors [{name, shape, offset, nbytes}]
    data                        raw little-endian float32 tensors; offsets are
                                relative to the start of this block

Batch-norm running statistics are stored as ``<stem>.running_mean`` and
``<stem>.running_var`` next to the trainable tensors.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .arch import Network, NetworkConfig, build_network

MAGIC = b"DVNETCKP"
VERSION = 1


def _tensors(net: Network):
    for name, p in net.named_parameters():
        yield name, p.data
    for stem, st in net.named_buffers():
        if st.initialized:
            yield f"{stem}.running_mean", st.mean
            yield f"{stem}.running_var", st.var


def save_checkpoint(net: Network, path) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name, arr in _tensors(net):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps(
        {"version": VERSION, "config": net.config.to_text(), "seed": net.seed, "tensors": manifest},
        indent=1,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        return _read_head(fh)[0]


def _read_head(fh):
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise ValueError(f"not a DVNet checkpoint (magic {magic!r})")
    version, n = struct.unpack("<IQ", fh.read(12))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    head = json.loads(fh.read(n).decode())
    return head, fh.tell()


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        head, start = _read_head(fh)
        data = fh.read()
    config = NetworkConfig.from_text(head["config"])
    net = build_network(config, head.get("seed", 0))
    entries = {e["name"]: e for e in head["tensors"]}

    def fetch(name, shape):
        e = entries.get(name)
        if e is None:
            raise KeyError(f"checkpoint lacks tensor {name!r}")
        if tuple(e["shape"]) != tuple(shape):
            raise ValueError(f"tensor {name!r}: stored shape {e['shape']} != expected {list(shape)}")
        buf = data[e["offset"]: e["offset"] + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise ValueError(f"tensor {name!r}: truncated data")
        return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)

    for name, p in net.named_parameters():
        p.data = fetch(name, p.shape)
    for stem, st in net.named_buffers():
        key = f"{stem}.running_mean"
        if key in entries:
            st.mean = fetch(key, st.mean.shape)
            st.var = fetch(f"{stem}.running_var", st.var.shape)
            st.initialized = True
    return net
