"""Batch-norm folding for inference."""

from __future__ import annotations

import numpy as np

from ..engine.functional import BatchNormParams
from ..engine.tensor import Tensor
from .graph import ConvParams, GraphError, GraphSpec, LayerNode, ParamStore, check_params, validate_graph


class FoldError(GraphError):
    pass


def fold_conv_bn(conv: ConvParams, bn: BatchNormParams, transposed: bool = False) -> ConvParams:
    """Merge eval-mode BN into the preceding conv.

    ``W' = W * gamma / sqrt(var + eps)`` per output channel and
    ``b' = (b - mean) * gamma / sqrt(var + eps) + beta``. Arithmetic is done
    in float64 and cast back to the conv's dtype.
    """
    dtype = conv.weight.dtype
    scale = bn.gamma.data.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    w = conv.weight.data.astype(np.float64)
    if transposed:
        w = w * scale.reshape(1, -1, 1, 1)
    else:
        w = w * scale.reshape(-1, 1, 1, 1)
    b = (conv.bias.data.astype(np.float64) - bn.running_mean.astype(np.float64)) * scale + bn.beta.data.astype(np.float64)
    return ConvParams(Tensor(w.astype(dtype)), Tensor(b.astype(dtype)))


def _stats_ready(bn: BatchNormParams) -> bool:
    arrays = (bn.running_mean, bn.running_var)
    return all(a is not None and np.isfinite(a).all() for a in arrays) and bool((bn.running_var >= 0).all())


def fold_batch_norm(graph: GraphSpec, params: ParamStore) -> tuple[GraphSpec, ParamStore]:
    """Replace every Conv -> BN pair by one conv; consumers of the BN read the conv."""
    check_params(graph, params)
    consumers = graph.consumers()
    rename: dict[str, str] = {}
    new_params = params.copy()
    for node in graph.nodes:
        if node.op != "bn":
            continue
        src = graph[node.inputs[0]]
        if src.op not in ("conv", "deconv"):
            raise FoldError(f"batch norm {node.id} is not preceded by a convolution (input {src.id} is {src.op})")
        if len(consumers[src.id]) != 1:
            raise FoldError(f"conv {src.id} feeds more than the batch norm {node.id}")
        bn = params[node.id]
        if not _stats_ready(bn):
            raise FoldError(f"batch norm {node.id} has no usable running statistics")
        new_params[src.id] = fold_conv_bn(params[src.id], bn, transposed=src.op == "deconv")
        del new_params.entries[node.id]
        rename[node.id] = src.id

    def fix(ref: str) -> str:
        return rename.get(ref, ref)

    nodes = []
    for node in graph.nodes:
        if node.op == "bn":
            continue
        hparams = dict(node.hparams)
        if node.op == "resize":
            hparams["like"] = fix(hparams["like"])
        nodes.append(LayerNode(node.id, node.op, tuple(fix(s) for s in node.inputs), hparams, node.scope))
    folded = graph.replace(nodes=tuple(nodes), output_id=fix(graph.output_id))
    validate_graph(folded)
    check_params(folded, new_params)
    return folded, new_params
