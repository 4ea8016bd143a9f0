"""Checkpoint container.

Layout (all integers little-endian)::

    0..3      magic b"DSN1"
    4..7      u32 header length L
    8..8+L    UTF-8 JSON header, space padded so the payload starts on a
              64-byte boundary
    8+L..     payload: raw little-endian IEEE-754 tensors, each at a
              64-byte aligned offset relative to the payload start

The header holds ``format_version``, ``network_config``, ``graph``,
``meta`` and ``tensors``: a directory of
``{name, shape, dtype, byte_offset, byte_length}``. JSON is written with
sorted keys so saving the same model twice yields identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np

from ..engine.functional import BatchNormParams
from ..engine.tensor import Tensor
from ..model.graph import PARAMETERIZED, ConvParams, GraphSpec, ParamStore, check_params, validate_graph

MAGIC = b"DSN1"
FORMAT_VERSION = 1
ALIGN = 64
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _tensor_fields(op: str) -> tuple[str, ...]:
    return ("gamma", "beta", "running_mean", "running_var") if op == "bn" else ("weight", "bias")


def encode_checkpoint(graph: GraphSpec, params: ParamStore, meta: dict[str, Any] | None = None) -> bytes:
    check_params(graph, params)
    arrays = params.arrays()
    directory = []
    chunks = []
    offset = 0
    for node in graph.nodes:
        if node.op not in PARAMETERIZED:
            continue
        for field in _tensor_fields(node.op):
            name = f"{node.id}.{field}"
            arr = np.asarray(arrays[name])
            dtype_name = arr.dtype.name
            if dtype_name not in _DTYPES:
                raise CheckpointError(f"{name}: unsupported dtype {dtype_name}")
            raw = arr.astype(_DTYPES[dtype_name], copy=False).tobytes(order="C")
            offset = _align(offset)
            directory.append(
                {"name": name, "shape": list(arr.shape), "dtype": dtype_name, "byte_offset": offset, "byte_length": len(raw)}
            )
            chunks.append((offset, raw))
            offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "network_config": dict(graph.config),
        "graph": graph.to_json(),
        "meta": meta or {},
        "tensors": directory,
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header_len = _align(8 + len(text)) - 8
    text = text + b" " * (header_len - len(text))
    payload = bytearray(offset)
    for off, raw in chunks:
        payload[off : off + len(raw)] = raw
    return MAGIC + struct.pack("<I", header_len) + text + bytes(payload)


def decode_checkpoint(buf: bytes) -> tuple[GraphSpec, ParamStore, dict]:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise CheckpointError("bad magic")
    (header_len,) = struct.unpack("<I", buf[4:8])
    if 8 + header_len > len(buf):
        raise CheckpointError("header length exceeds file size")
    try:
        header = json.loads(buf[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"version mismatch: file has {header.get('format_version')}, reader supports {FORMAT_VERSION}")
    payload = memoryview(buf)[8 + header_len :]
    graph = GraphSpec.from_json(header["graph"])
    validate_graph(graph)

    tensors: dict[str, np.ndarray] = {}
    end = 0
    for entry in header["tensors"]:
        name = entry["name"]
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{name}: unsupported dtype {entry['dtype']}")
        off, length = int(entry["byte_offset"]), int(entry["byte_length"])
        shape = tuple(int(s) for s in entry["shape"])
        if off % ALIGN:
            raise CheckpointError(f"{name}: offset {off} is not {ALIGN}-byte aligned")
        if length != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"{name}: byte_length {length} inconsistent with shape {shape}")
        if off + length > len(payload):
            raise CheckpointError(f"{name}: extends past end of payload")
        tensors[name] = np.frombuffer(payload[off : off + length], dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        end = max(end, off + length)
    if end != len(payload):
        raise CheckpointError(f"payload has {len(payload) - end} unaccounted bytes")

    store = ParamStore()
    for node in graph.nodes:
        if node.op not in PARAMETERIZED:
            continue
        try:
            got = {f: tensors.pop(f"{node.id}.{f}") for f in _tensor_fields(node.op)}
        except KeyError as exc:
            raise CheckpointError(f"tensor {exc.args[0]} missing from directory") from None
        if node.op == "bn":
            store[node.id] = BatchNormParams(
                gamma=Tensor(got["gamma"]),
                beta=Tensor(got["beta"]),
                running_mean=got["running_mean"],
                running_var=got["running_var"],
                eps=node.hparams["eps"],
                momentum=node.hparams["momentum"],
            )
        else:
            store[node.id] = ConvParams(Tensor(got["weight"]), Tensor(got["bias"]))
    if tensors:
        raise CheckpointError(f"tensors not referenced by the graph: {', '.join(sorted(tensors)[:5])}")
    try:
        check_params(graph, store)
    except ValueError as exc:
        raise CheckpointError(f"shape mismatch vs graph: {exc}") from None
    return graph, store, header.get("meta", {})


def save_checkpoint(graph: GraphSpec, params: ParamStore, meta: dict | None, path: str | os.PathLike) -> None:
    """Write atomically: the file appears only once complete."""
    data = encode_checkpoint(graph, params, meta)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[GraphSpec, ParamStore, dict]:
    return decode_checkpoint(Path(path).read_bytes())
