"""Layer graphs, parameter stores, shape propagation and graph execution."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Mapping

import numpy as np

from ..engine import functional as F
from ..engine.functional import BatchNormParams
from ..engine.rng import RngState
from ..engine.tensor import ShapeError, Tensor

OP_KINDS = ("input", "conv", "bn", "relu", "dropout", "pool", "gap", "resize", "concat", "deconv")
PARAMETERIZED = ("conv", "deconv", "bn")
VARIANTS = ("fast", "accurate", "classifier")


class GraphError(ValueError):
    pass


class ParamError(ValueError):
    pass


@dataclass(frozen=True)
class LayerNode:
    """One operation in a :class:`GraphSpec`.

    ``hparams`` per op kind:

    * conv / deconv: ``in_channels, out_channels, kernel, stride, padding``
    * bn: ``channels, eps, momentum``
    * pool: ``mode, kernel, stride``
    * dropout: ``rate``
    * resize: ``like`` (id of an earlier node whose spatial size is the target)
    * input: ``channels``

    ``scope`` groups nodes that belong to one architectural unit, e.g.
    ``b3.u4`` for the fourth dense unit of block 3.
    """

    id: str
    op: str
    inputs: tuple[str, ...] = ()
    hparams: Mapping[str, Any] = field(default_factory=dict)
    scope: str = ""

    def to_json(self) -> dict:
        return {"id": self.id, "op": self.op, "inputs": list(self.inputs), "hparams": dict(self.hparams), "scope": self.scope}

    @classmethod
    def from_json(cls, d: Mapping) -> "LayerNode":
        return cls(id=d["id"], op=d["op"], inputs=tuple(d["inputs"]), hparams=dict(d["hparams"]), scope=d.get("scope", ""))


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise GraphError(msg)


def _check_hparams(node: LayerNode) -> None:
    hp = node.hparams
    op = node.op
    _require(op in OP_KINDS, f"node {node.id}: unknown op kind {op!r}")
    if op in ("conv", "deconv"):
        for key in ("in_channels", "out_channels", "kernel", "stride", "padding"):
            _require(key in hp, f"node {node.id}: missing {key}")
        _require(hp["in_channels"] > 0 and hp["out_channels"] > 0, f"node {node.id}: channels must be positive")
        _require(hp["kernel"] > 0 and hp["stride"] > 0 and hp["padding"] >= 0, f"node {node.id}: bad kernel/stride/padding")
    elif op == "bn":
        _require(hp.get("channels", 0) > 0, f"node {node.id}: bn channels must be positive")
        _require(hp.get("eps", 0) > 0, f"node {node.id}: bn eps must be positive")
        _require(0 < hp.get("momentum", 0) <= 1, f"node {node.id}: bn momentum must be in (0, 1]")
    elif op == "pool":
        _require(hp.get("mode") in ("max", "avg"), f"node {node.id}: pool mode must be max or avg")
        _require(hp.get("kernel", 0) > 0 and hp.get("stride", 0) > 0, f"node {node.id}: bad pool window")
    elif op == "dropout":
        _require(0 <= hp.get("rate", -1) < 1, f"node {node.id}: dropout rate must be in [0, 1)")
    elif op == "resize":
        _require("like" in hp, f"node {node.id}: resize needs a 'like' reference")
    elif op == "input":
        _require(hp.get("channels", 0) > 0, f"node {node.id}: input channels must be positive")
    n_in = len(node.inputs)
    if op == "input":
        _require(n_in == 0, f"node {node.id}: input node takes no inputs")
    elif op == "concat":
        _require(n_in >= 1, f"node {node.id}: concat needs inputs")
    else:
        _require(n_in == 1, f"node {node.id}: {op} takes exactly one input")


@dataclass(frozen=True)
class GraphSpec:
    """Immutable, topologically ordered network description."""

    nodes: tuple[LayerNode, ...]
    input_id: str
    output_id: str
    variant: str
    num_classes: int
    config: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "_index", {n.id: n for n in self.nodes})

    def __iter__(self) -> Iterator[LayerNode]:
        return iter(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._index

    def __getitem__(self, node_id: str) -> LayerNode:
        try:
            return self._index[node_id]
        except KeyError:
            raise GraphError(f"no node named {node_id!r}") from None

    def by_op(self, op: str) -> list[LayerNode]:
        return [n for n in self.nodes if n.op == op]

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for src in n.inputs:
                out[src].append(n.id)
        return out

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "num_classes": self.num_classes,
            "input": self.input_id,
            "output": self.output_id,
            "config": dict(self.config),
            "nodes": [n.to_json() for n in self.nodes],
        }

    def canonical(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, d: Mapping) -> "GraphSpec":
        return cls(
            nodes=tuple(LayerNode.from_json(n) for n in d["nodes"]),
            input_id=d["input"],
            output_id=d["output"],
            variant=d["variant"],
            num_classes=int(d["num_classes"]),
            config=dict(d.get("config", {})),
        )

    def replace(self, **changes) -> "GraphSpec":
        fields = dict(
            nodes=self.nodes,
            input_id=self.input_id,
            output_id=self.output_id,
            variant=self.variant,
            num_classes=self.num_classes,
            config=self.config,
        )
        fields.update(changes)
        return GraphSpec(**fields)


def validate_graph(graph: GraphSpec, probe_shape: tuple[int, int, int] | None = None) -> None:
    """Check ids, ordering, hyperparameters, reachability and shape propagation."""
    _require(graph.variant in VARIANTS, f"unknown variant {graph.variant!r}")
    _require(graph.num_classes > 0, "num_classes must be positive")
    seen: set[str] = set()
    inputs = [n for n in graph.nodes if n.op == "input"]
    _require(len(inputs) == 1, f"graph needs exactly one input node, found {len(inputs)}")
    _require(inputs[0].id == graph.input_id, "designated input is not the input node")
    for node in graph.nodes:
        _require(node.id not in seen, f"duplicate node id {node.id!r}")
        _check_hparams(node)
        for src in node.inputs:
            _require(src in seen, f"node {node.id}: input {src!r} is not an earlier node")
        if node.op == "resize":
            _require(node.hparams["like"] in seen, f"node {node.id}: 'like' must reference an earlier node")
        seen.add(node.id)
    _require(graph.output_id in seen, f"output node {graph.output_id!r} missing")

    forward = {graph.input_id}
    for node in graph.nodes:
        if any(s in forward for s in node.inputs):
            forward.add(node.id)
    backward = {graph.output_id}
    for node in reversed(graph.nodes):
        if node.id in backward:
            backward.update(node.inputs)
    for node in graph.nodes:
        _require(node.id in forward, f"node {node.id} is not reachable from the input")
        _require(node.id in backward, f"node {node.id} does not reach the output")

    if probe_shape is not None:
        infer_shapes(graph, (1, *probe_shape))


def infer_shapes(graph: GraphSpec, input_shape: tuple[int, int, int, int]) -> dict[str, tuple[int, int, int, int]]:
    """Closed-form output shape of every node for a given input shape."""
    shapes: dict[str, tuple[int, int, int, int]] = {}
    for node in graph.nodes:
        hp = node.hparams
        try:
            if node.op == "input":
                if len(input_shape) != 4 or input_shape[1] != hp["channels"]:
                    raise ShapeError(f"input shape {input_shape} incompatible with {hp['channels']} channels")
                shape = tuple(int(v) for v in input_shape)
            else:
                ins = [shapes[s] for s in node.inputs]
                n, c, h, w = ins[0]
                if node.op == "conv":
                    if c != hp["in_channels"]:
                        raise ShapeError(f"expects {hp['in_channels']} channels, got {c}")
                    ho = F.conv_output_size(h, hp["kernel"], hp["stride"], hp["padding"])
                    wo = F.conv_output_size(w, hp["kernel"], hp["stride"], hp["padding"])
                    shape = (n, hp["out_channels"], ho, wo)
                elif node.op == "deconv":
                    if c != hp["in_channels"]:
                        raise ShapeError(f"expects {hp['in_channels']} channels, got {c}")
                    ho = F.deconv_output_size(h, hp["kernel"], hp["stride"], hp["padding"])
                    wo = F.deconv_output_size(w, hp["kernel"], hp["stride"], hp["padding"])
                    shape = (n, hp["out_channels"], ho, wo)
                elif node.op == "bn":
                    if c != hp["channels"]:
                        raise ShapeError(f"expects {hp['channels']} channels, got {c}")
                    shape = ins[0]
                elif node.op in ("relu", "dropout"):
                    shape = ins[0]
                elif node.op == "pool":
                    k, s = hp["kernel"], hp["stride"]
                    if k > h or k > w:
                        raise ShapeError(f"pool window {k} exceeds {h}x{w}")
                    shape = (n, c, (h - k) // s + 1, (w - k) // s + 1)
                elif node.op == "gap":
                    shape = (n, c, 1, 1)
                elif node.op == "resize":
                    ref = shapes[hp["like"]]
                    shape = (n, c, ref[2], ref[3])
                elif node.op == "concat":
                    for other in ins[1:]:
                        if (other[0], other[2], other[3]) != (n, h, w):
                            raise ShapeError(f"concat mismatch {ins[0]} vs {other}")
                    shape = (n, sum(s[1] for s in ins), h, w)
                else:  # pragma: no cover - guarded by validation
                    raise GraphError(f"unknown op {node.op}")
                if min(shape[2], shape[3]) < 1:
                    raise ShapeError(f"non-positive spatial size {shape[2:]}")
        except ShapeError as exc:
            raise ShapeError(f"shape propagation failed at {node.id}: {exc}") from None
        shapes[node.id] = shape
    return shapes


# --------------------------------------------------------------------------
# parameters


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor


class ParamStore:
    """Learnable tensors and batch-norm statistics keyed by node id."""

    def __init__(self, entries: dict[str, ConvParams | BatchNormParams] | None = None):
        self.entries: dict[str, ConvParams | BatchNormParams] = dict(entries or {})

    def __getitem__(self, node_id: str):
        return self.entries[node_id]

    def __setitem__(self, node_id: str, value) -> None:
        self.entries[node_id] = value

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self):
        return self.entries.keys()

    def items(self):
        return self.entries.items()

    def learnable(self) -> dict[str, Tensor]:
        """Flat ``{"node.field": Tensor}`` of everything the optimizer updates."""
        out: dict[str, Tensor] = {}
        for key, p in self.entries.items():
            if isinstance(p, ConvParams):
                out[f"{key}.weight"] = p.weight
                out[f"{key}.bias"] = p.bias
            else:
                out[f"{key}.gamma"] = p.gamma
                out[f"{key}.beta"] = p.beta
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        """Flat view of every stored array, learnable and running statistics."""
        out: dict[str, np.ndarray] = {}
        for key, p in self.entries.items():
            if isinstance(p, ConvParams):
                out[f"{key}.weight"] = p.weight.data
                out[f"{key}.bias"] = p.bias.data
            else:
                out[f"{key}.gamma"] = p.gamma.data
                out[f"{key}.beta"] = p.beta.data
                out[f"{key}.running_mean"] = p.running_mean
                out[f"{key}.running_var"] = p.running_var
        return out

    def copy(self) -> "ParamStore":
        new: dict[str, ConvParams | BatchNormParams] = {}
        for key, p in self.entries.items():
            if isinstance(p, ConvParams):
                new[key] = ConvParams(Tensor(p.weight.data.copy()), Tensor(p.bias.data.copy()))
            else:
                new[key] = BatchNormParams(
                    gamma=Tensor(p.gamma.data.copy()),
                    beta=Tensor(p.beta.data.copy()),
                    running_mean=p.running_mean.copy(),
                    running_var=p.running_var.copy(),
                    eps=p.eps,
                    momentum=p.momentum,
                )
        return ParamStore(new)

    def astype(self, dtype) -> "ParamStore":
        out = self.copy()
        for p in out.entries.values():
            if isinstance(p, ConvParams):
                p.weight = Tensor(p.weight.data.astype(dtype))
                p.bias = Tensor(p.bias.data.astype(dtype))
            else:
                p.gamma = Tensor(p.gamma.data.astype(dtype))
                p.beta = Tensor(p.beta.data.astype(dtype))
                p.running_mean = p.running_mean.astype(dtype)
                p.running_var = p.running_var.astype(dtype)
        return out

    def set_requires_grad(self, flag: bool = True) -> None:
        for t in self.learnable().values():
            t.requires_grad = flag


def expected_param_shapes(node: LayerNode) -> dict[str, tuple[int, ...]]:
    hp = node.hparams
    if node.op == "conv":
        k = hp["kernel"]
        return {"weight": (hp["out_channels"], hp["in_channels"], k, k), "bias": (hp["out_channels"],)}
    if node.op == "deconv":
        k = hp["kernel"]
        return {"weight": (hp["in_channels"], hp["out_channels"], k, k), "bias": (hp["out_channels"],)}
    if node.op == "bn":
        c = hp["channels"]
        return {"gamma": (c,), "beta": (c,), "running_mean": (c,), "running_var": (c,)}
    return {}


def check_params(graph: GraphSpec, params: ParamStore) -> None:
    """Keys must match the parameterized nodes exactly, with matching shapes."""
    wanted = {n.id: n for n in graph.nodes if n.op in PARAMETERIZED}
    missing = sorted(set(wanted) - set(params.keys()))
    extra = sorted(set(params.keys()) - set(wanted))
    if missing:
        raise ParamError(f"parameters missing for nodes: {', '.join(missing[:5])}")
    if extra:
        raise ParamError(f"parameters for unknown nodes: {', '.join(extra[:5])}")
    for node_id, node in wanted.items():
        p = params[node_id]
        if node.op == "bn":
            if not isinstance(p, BatchNormParams):
                raise ParamError(f"{node_id}: expected batch-norm parameters")
            arrays = {"gamma": p.gamma.data, "beta": p.beta.data, "running_mean": p.running_mean, "running_var": p.running_var}
        else:
            if not isinstance(p, ConvParams):
                raise ParamError(f"{node_id}: expected weight and bias")
            arrays = {"weight": p.weight.data, "bias": p.bias.data}
        for name, shape in expected_param_shapes(node).items():
            if arrays[name].shape != shape:
                raise ParamError(f"{node_id}.{name}: shape {arrays[name].shape} != expected {shape}")


def init_params(graph: GraphSpec, rng: RngState, dtype=np.float32) -> ParamStore:
    """Fan-in scaled normal weights (std = sqrt(2 / fan_in)), zero biases, identity BN.

    For a transposed convolution the fan-in of one output pixel is
    ``C_in * (k / stride)**2``.
    """
    store = ParamStore()
    for node in graph.nodes:
        hp = node.hparams
        if node.op in ("conv", "deconv"):
            shapes = expected_param_shapes(node)
            k = hp["kernel"]
            if node.op == "conv":
                fan_in = hp["in_channels"] * k * k
            else:
                fan_in = max(1.0, hp["in_channels"] * (k / hp["stride"]) ** 2)
            w = rng.normal(shapes["weight"]) * np.sqrt(2.0 / fan_in)
            store[node.id] = ConvParams(Tensor(w.astype(dtype)), Tensor(np.zeros(hp["out_channels"], dtype=dtype)))
        elif node.op == "bn":
            store[node.id] = BatchNormParams.identity(hp["channels"], dtype, hp["eps"], hp["momentum"])
    return store


# --------------------------------------------------------------------------
# execution

NodeHook = Callable[[LayerNode, Tensor], None]


def run_node(node: LayerNode, args: list[Tensor], env: Mapping[str, Tensor], params: ParamStore, mode: str, rng: RngState | None) -> Tensor:
    hp = node.hparams
    op = node.op
    if op == "conv":
        p = params[node.id]
        return F.conv2d(args[0], p.weight, p.bias, hp["stride"], hp["padding"])
    if op == "deconv":
        p = params[node.id]
        return F.transposed_conv2d(args[0], p.weight, p.bias, hp["stride"], hp["padding"])
    if op == "bn":
        return F.batch_norm(args[0], params[node.id], mode)
    if op == "relu":
        return F.relu(args[0])
    if op == "dropout":
        return F.dropout(args[0], hp["rate"], mode, rng)
    if op == "pool":
        return F.pool2d(args[0], hp["mode"], hp["kernel"], hp["stride"])
    if op == "gap":
        return F.global_avg_pool(args[0])
    if op == "resize":
        ref = env[hp["like"]]
        return F.bilinear_resize(args[0], ref.shape[2], ref.shape[3])
    if op == "concat":
        return F.concat_channels(args)
    raise GraphError(f"cannot execute op {op!r}")


def forward(
    graph: GraphSpec,
    params: ParamStore,
    x: Tensor | np.ndarray,
    mode: str = F.EVAL,
    rng: RngState | None = None,
    keep: tuple[str, ...] | None = None,
    hook: NodeHook | None = None,
) -> Tensor | dict[str, Tensor]:
    """Execute the graph.

    Activations are released as soon as their last consumer has run unless
    listed in ``keep``. Returns the output tensor, or ``{id: tensor}`` for
    the output plus every kept node when ``keep`` is given.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    last_use: dict[str, int] = {}
    for i, node in enumerate(graph.nodes):
        for src in node.inputs:
            last_use[src] = i
        if node.op == "resize":
            last_use[node.hparams["like"]] = i
    pinned = set(keep or ()) | {graph.output_id}
    env: dict[str, Tensor] = {}
    for i, node in enumerate(graph.nodes):
        if node.op == "input":
            if x.ndim != 4 or x.shape[1] != node.hparams["channels"]:
                raise ShapeError(f"input shape {x.shape} does not match {node.hparams['channels']} channels")
            out = x
        else:
            out = run_node(node, [env[s] for s in node.inputs], env, params, mode, rng)
        env[node.id] = out
        if hook is not None:
            hook(node, out)
        for src in set(node.inputs) | ({node.hparams["like"]} if node.op == "resize" else set()):
            if last_use.get(src) == i and src not in pinned:
                del env[src]
    if keep is None:
        return env[graph.output_id]
    return {k: env[k] for k in pinned}
