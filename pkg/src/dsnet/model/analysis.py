"""Static analyses: parameter counts, multiply-accumulate counts, receptive fields."""

from __future__ import annotations

import math
import re
from collections import Counter

from .graph import GraphError, GraphSpec, ParamStore, check_params, infer_shapes

MB = 2**20
_UNIT_SCOPE = re.compile(r"^b(\d+)\.u(\d+)$")


def count_parameters(graph: GraphSpec, params: ParamStore) -> dict:
    """Scalar count over weights, biases and BN affine + running vectors.

    Model size is reported as float32 bytes (4 per scalar) and MB = bytes / 2**20.
    """
    check_params(graph, params)
    total = sum(int(a.size) for a in params.arrays().values())
    return {"total_count": total, "float32_bytes": 4 * total, "megabytes": 4 * total / MB}


def node_macs(node, in_shapes, out_shape) -> int:
    """Multiply-accumulate count of one node (whole batch).

    conv     N*Cout*Ho*Wo*Cin*k*k
    deconv   N*Cin*H*W*Cout*k*k   (every input pixel scatters a k x k stamp)
    bn       N*C*H*W              (one fused scale-and-shift per element)
    pool     N*C*Ho*Wo*k*k for avg, 0 for max (comparisons only)
    gap      N*C*H*W
    resize   4 per output element, 0 when the size is unchanged
    others   0 (relu, concat, dropout, input)
    """
    hp = node.hparams
    n, c, ho, wo = out_shape
    if node.op == "conv":
        k = hp["kernel"]
        return n * hp["out_channels"] * ho * wo * hp["in_channels"] * k * k
    if node.op == "deconv":
        k = hp["kernel"]
        _, cin, h, w = in_shapes[0]
        return n * cin * h * w * hp["out_channels"] * k * k
    if node.op == "bn":
        return n * c * ho * wo
    if node.op == "pool":
        return n * c * ho * wo * hp["kernel"] ** 2 if hp["mode"] == "avg" else 0
    if node.op == "gap":
        _, _, h, w = in_shapes[0]
        return n * c * h * w
    if node.op == "resize":
        return 0 if in_shapes[0][2:] == out_shape[2:] else 4 * n * c * ho * wo
    return 0


def _full_shape(input_shape) -> tuple[int, int, int, int]:
    shape = tuple(int(v) for v in input_shape)
    if len(shape) == 3:
        shape = (1, *shape)
    if len(shape) != 4 or min(shape) < 1:
        raise ValueError(f"input shape must be (C, H, W) or (N, C, H, W) of positive ints, got {input_shape}")
    return shape


def count_flops(graph: GraphSpec, input_shape) -> dict:
    """Per-node and total MACs for ``input_shape`` given as (C, H, W) or (N, C, H, W)."""
    shapes = infer_shapes(graph, _full_shape(input_shape))
    per_node = {}
    for node in graph.nodes:
        ins = [shapes[s] for s in node.inputs]
        per_node[node.id] = node_macs(node, ins, shapes[node.id])
    return {"per_node": per_node, "total": sum(per_node.values()), "shapes": shapes}


def receptive_field(graph: GraphSpec, node_id: str) -> dict:
    """Receptive field and cumulative stride of ``node_id`` relative to the input.

    Composition per node: ``r <- r + (k - 1) * j`` and ``j <- j * s`` for conv
    and pool. A transposed conv with kernel k and stride s sees
    ``ceil(k / s)`` input pixels per axis and divides the jump by s. A
    bilinear resize reads two neighbours per axis and takes the jump of its
    size reference. Multi-input nodes take the max over inputs; global
    pooling reports an unbounded field.
    """
    if node_id not in graph:
        raise GraphError(f"unknown node {node_id!r}")
    reach = {graph.input_id}
    rf: dict[str, tuple[float, float]] = {}
    for node in graph.nodes:
        hp = node.hparams
        if node.op == "input":
            rf[node.id] = (1.0, 1.0)
            continue
        if not any(s in reach for s in node.inputs):
            continue
        reach.add(node.id)
        r, j = max(rf[s] for s in node.inputs if s in rf)
        if node.op in ("conv", "pool"):
            r, j = r + (hp["kernel"] - 1) * j, j * hp["stride"]
        elif node.op == "deconv":
            taps = math.ceil(hp["kernel"] / hp["stride"])
            r, j = r + (taps - 1) * j, j / hp["stride"]
        elif node.op == "resize":
            ref = rf.get(hp["like"], (r, j))
            r, j = r + j, ref[1]
        elif node.op == "gap":
            r = math.inf
        rf[node.id] = (r, j)
    if node_id not in rf:
        raise GraphError(f"node {node_id!r} is not reachable from the input")
    r, j = rf[node_id]
    return {"rf_h": r, "rf_w": r, "stride_h": j, "stride_w": j}


def count_units(graph: GraphSpec) -> dict[str, int]:
    """Count dense units by inspecting the graph: a unit with a 1x1 conv is a bottleneck unit."""
    scopes: dict[str, bool] = {}
    for node in graph.nodes:
        if _UNIT_SCOPE.match(node.scope):
            has_1x1 = node.op == "conv" and node.hparams["kernel"] == 1
            scopes[node.scope] = scopes.get(node.scope, False) or has_1x1
    kinds = Counter("bottleneck" if b else "non_bottleneck" for b in scopes.values())
    return {"non_bottleneck": kinds.get("non_bottleneck", 0), "bottleneck": kinds.get("bottleneck", 0)}


def units_per_block(graph: GraphSpec) -> dict[int, int]:
    blocks: dict[int, set[str]] = {}
    for node in graph.nodes:
        m = _UNIT_SCOPE.match(node.scope)
        if m:
            blocks.setdefault(int(m.group(1)), set()).add(node.scope)
    return {b: len(s) for b, s in sorted(blocks.items())}


def concat_width(graph: GraphSpec, node_id: str = "dec.concat") -> int:
    node = graph[node_id]
    if node.op != "concat":
        raise GraphError(f"{node_id} is not a concat node")
    width = 0
    for src in node.inputs:
        width += _channels_of(graph, src)
    return width


def _channels_of(graph: GraphSpec, node_id: str) -> int:
    node = graph[node_id]
    hp = node.hparams
    if node.op in ("conv", "deconv"):
        return hp["out_channels"]
    if node.op == "bn":
        return hp["channels"]
    if node.op == "input":
        return hp["channels"]
    if node.op == "concat":
        return sum(_channels_of(graph, s) for s in node.inputs)
    return _channels_of(graph, node.inputs[0])


def analyze(graph: GraphSpec, params: ParamStore, input_shape) -> dict:
    """Everything the ``analyze`` command reports."""
    size = count_parameters(graph, params)
    flops = count_flops(graph, input_shape)
    nodes = []
    for node in graph.nodes:
        rf = receptive_field(graph, node.id)
        nodes.append(
            {
                "id": node.id,
                "op": node.op,
                "shape": list(flops["shapes"][node.id]),
                "macs": flops["per_node"][node.id],
                "rf": None if math.isinf(rf["rf_h"]) else rf["rf_h"],
                "stride": rf["stride_h"],
            }
        )
    report = {
        "variant": graph.variant,
        "num_classes": graph.num_classes,
        "input_shape": list(_full_shape(input_shape)),
        "parameters": size["total_count"],
        "float32_bytes": size["float32_bytes"],
        "megabytes": size["megabytes"],
        "total_macs": flops["total"],
        "units": count_units(graph),
        "units_per_block": {f"block{b}": n for b, n in units_per_block(graph).items()},
        "bn_nodes": len(graph.by_op("bn")),
        "output_shape": list(flops["shapes"][graph.output_id]),
        "nodes": nodes,
    }
    if "dec.concat" in graph:
        report["concat_channels"] = concat_width(graph)
    return report
