"""Binary checkpoint of a network and its training position.

Layout (all integers little-endian)::

    8 bytes   magic b"WNETCKPT"
    u32       format version (currently 1)
    u32       header length L in bytes
    L bytes   UTF-8 JSON header
    ...       tensor payload

The header holds the network config, the training config, the training
state (next iteration and the PCG64 bit-generator state) and a tensor table
whose entries give ``name``, ``group`` (``param`` or ``state``), ``dtype``,
``shape``, and the byte ``offset`` of the tensor relative to the start of
the payload.  Tensors are stored C-ordered in little-endian byte order.
The header is serialized with sorted keys so equal checkpoints are equal
byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .network import NetworkParams, WNetConfig
from .train import TrainConfig, TrainState

MAGIC = b"WNETCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    if state.get("bit_generator") != "PCG64":
        raise CheckpointError(f"unsupported generator {state.get('bit_generator')!r}")
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def save_checkpoint(path, net: NetworkParams, tc: TrainConfig | None = None,
                    state: TrainState | None = None) -> None:
    table, chunks, offset = [], [], 0
    for group, tensors in (("param", net.params), ("state", net.state)):
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            table.append({"name": name, "group": group, "dtype": arr.dtype.name,
                          "shape": list(arr.shape), "offset": offset})
            chunks.append(data)
            offset += len(data)
    header = {
        "wnet": net.config.to_dict(),
        "train": None if tc is None else tc.to_dict(),
        "state": None if state is None else {
            "iteration": state.iteration,
            "rng": _rng_state(state.rng),
        },
        "tensors": table,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path):
    """Return ``(net, train_config or None, train_state or None)``.

    The restored state carries an empty trace; the loss history lives in the
    trace CSV next to the checkpoint.
    """
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(buf) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    try:
        header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = memoryview(buf)[16 + hlen :]
    params, stats = {}, {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + count * dtype.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(payload[entry["offset"] : end], dtype=dtype)
        arr = arr.astype(dtype.newbyteorder("="), copy=True).reshape(entry["shape"])
        (params if entry["group"] == "param" else stats)[entry["name"]] = arr
    net = NetworkParams(WNetConfig.from_dict(header["wnet"]), params, stats)
    arch = net.arch
    names = set(arch.encoder.param_names()) | set(arch.decoder.param_names())
    stat_names = set(arch.encoder.init_state(np.float64)) | set(arch.decoder.init_state(np.float64))
    if set(params) != names or set(stats) != stat_names:
        raise CheckpointError(f"{path}: tensors do not match the stored network config")
    tc = None if header["train"] is None else TrainConfig(**header["train"])
    state = None
    if header["state"] is not None:
        state = TrainState(header["state"]["iteration"], _restore_rng(header["state"]["rng"]))
    return net, tc, state
