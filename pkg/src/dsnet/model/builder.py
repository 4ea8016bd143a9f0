"""Builders for DSNet-fast, DSNet-accurate and the encoder classification head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..engine.rng import RngState
from .graph import GraphSpec, LayerNode, ParamStore, init_params, validate_graph

NON_BOTTLENECK = "nb"
BOTTLENECK = "b"
CANONICAL_BLOCK_KIND = (NON_BOTTLENECK, NON_BOTTLENECK, BOTTLENECK, BOTTLENECK, BOTTLENECK)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DenseUnitConfig:
    growth: int = 32
    bottleneck: bool = False
    bottleneck_width: int = 128

    def __post_init__(self):
        if self.growth <= 0:
            raise ConfigError("growth must be positive")
        if self.bottleneck and self.bottleneck_width < self.growth:
            raise ConfigError("bottleneck_width must be >= growth")


@dataclass(frozen=True)
class NetworkConfig:
    variant: str = "fast"
    num_classes: int = 19
    growth: int = 32
    initial_channels: int = 32
    compression: float = 0.5
    block_units: tuple[int, ...] = (2, 2, 8, 10, 8)
    block_kind: tuple[str, ...] = CANONICAL_BLOCK_KIND
    bottleneck_width: int = 128
    dropout_rate: float = 0.0
    decoder_channels: int = 32
    deconv_kernel: int = 8
    deconv_stride: int = 4
    deconv_padding: int = 2
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "block_units", tuple(int(u) for u in self.block_units))
        object.__setattr__(self, "block_kind", tuple(self.block_kind))
        self.validate()

    def validate(self) -> None:
        if self.variant not in ("fast", "accurate"):
            raise ConfigError(f"variant must be 'fast' or 'accurate', got {self.variant!r}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if len(self.block_units) != 5 or any(u < 1 for u in self.block_units):
            raise ConfigError("block_units must be five positive unit counts")
        if self.block_kind != CANONICAL_BLOCK_KIND:
            raise ConfigError(f"block_kind must be {CANONICAL_BLOCK_KIND}")
        if not 0 < self.compression <= 1:
            raise ConfigError("compression must be in (0, 1]")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must be in [0, 1)")
        for name in ("growth", "initial_channels", "decoder_channels", "deconv_kernel", "deconv_stride", "in_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        DenseUnitConfig(self.growth, True, self.bottleneck_width)

    @property
    def minimum_stride(self) -> int:
        """Input H and W must be multiples of this for exact shape identity."""
        return 32 if self.variant == "fast" else 16

    def unit_config(self, block: int) -> DenseUnitConfig:
        return DenseUnitConfig(self.growth, self.block_kind[block] == BOTTLENECK, self.bottleneck_width)

    def to_json(self) -> dict:
        d = asdict(self)
        d["block_units"] = list(self.block_units)
        d["block_kind"] = list(self.block_kind)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["block_units"] = tuple(d.get("block_units", (2, 2, 8, 10, 8)))
        d["block_kind"] = tuple(d.get("block_kind", CANONICAL_BLOCK_KIND))
        return cls(**d)


@dataclass
class Fragment:
    """A run of nodes plus the id and channel count of its last output."""

    nodes: list[LayerNode]
    out: str
    channels: int
    taps: dict[str, tuple[str, int]] = field(default_factory=dict)


def _cbr(prefix: str, src: str, cin: int, cout: int, kernel: int, stride: int, scope: str) -> list[LayerNode]:
    """Conv -> BN -> ReLU."""
    return [
        LayerNode(
            f"{prefix}.conv",
            "conv",
            (src,),
            {"in_channels": cin, "out_channels": cout, "kernel": kernel, "stride": stride, "padding": kernel // 2},
            scope,
        ),
        LayerNode(f"{prefix}.bn", "bn", (f"{prefix}.conv",), {"channels": cout, "eps": BN_EPS, "momentum": BN_MOMENTUM}, scope),
        LayerNode(f"{prefix}.relu", "relu", (f"{prefix}.bn",), {}, scope),
    ]


def build_initial_block(variant: str, src: str = "image", in_channels: int = 3, out_channels: int = 32) -> Fragment:
    if variant not in ("fast", "accurate"):
        raise ConfigError(f"unknown variant {variant!r}")
    stride = 2 if variant == "fast" else 1
    nodes = _cbr("init", src, in_channels, out_channels, 3, stride, "init")
    return Fragment(nodes, nodes[-1].id, out_channels)


def build_dense_unit(src: str, in_channels: int, cfg: DenseUnitConfig, prefix: str, dropout_rate: float = 0.0) -> Fragment:
    """One modified dense unit; its output is concatenated with its input."""
    if in_channels <= 0:
        raise ConfigError("in_channels must be positive")
    nodes: list[LayerNode] = []
    cur, cin = src, in_channels
    stages = []
    if cfg.bottleneck:
        stages.append(("c1x1", cfg.bottleneck_width, 1))
    stages += [("c3x3a", cfg.growth, 3), ("c3x3b", cfg.growth, 3)]
    for name, cout, k in stages:
        part = _cbr(f"{prefix}.{name}", cur, cin, cout, k, 1, prefix)
        nodes += part
        cur, cin = part[-1].id, cout
    if dropout_rate > 0:
        nodes.append(LayerNode(f"{prefix}.drop", "dropout", (cur,), {"rate": dropout_rate}, prefix))
        cur = nodes[-1].id
    nodes.append(LayerNode(f"{prefix}.cat", "concat", (src, cur), {}, prefix))
    return Fragment(nodes, nodes[-1].id, in_channels + cfg.growth)


def build_transition(src: str, in_channels: int, compression: float, prefix: str) -> Fragment:
    if in_channels < 2 and compression < 1:
        raise ConfigError("transition needs at least 2 input channels")
    out_channels = math.floor(in_channels * compression)
    if out_channels < 1:
        raise ConfigError(f"transition would produce {out_channels} channels")
    nodes = _cbr(f"{prefix}", src, in_channels, out_channels, 1, 1, prefix)
    nodes.append(LayerNode(f"{prefix}.pool", "pool", (nodes[-1].id,), {"mode": "avg", "kernel": 2, "stride": 2}, prefix))
    return Fragment(nodes, nodes[-1].id, out_channels)


def build_encoder(cfg: NetworkConfig, src: str = "image") -> Fragment:
    """Initial block, five dense blocks and four transitions.

    ``taps`` maps ``block1``..``block5`` to the pre-transition block output.
    """
    frag = build_initial_block(cfg.variant, src, cfg.in_channels, cfg.initial_channels)
    nodes = list(frag.nodes)
    cur, ch = frag.out, frag.channels
    taps: dict[str, tuple[str, int]] = {}
    for b, units in enumerate(cfg.block_units, start=1):
        ucfg = cfg.unit_config(b - 1)
        for u in range(1, units + 1):
            unit = build_dense_unit(cur, ch, ucfg, f"b{b}.u{u}", cfg.dropout_rate)
            nodes += unit.nodes
            cur, ch = unit.out, unit.channels
        taps[f"block{b}"] = (cur, ch)
        if b < 5:
            trans = build_transition(cur, ch, cfg.compression, f"t{b}")
            nodes += trans.nodes
            cur, ch = trans.out, trans.channels
    return Fragment(nodes, cur, ch, taps)


def decoder_tap_blocks(variant: str) -> tuple[str, ...]:
    return ("block2", "block3", "block4", "block5") if variant == "fast" else ("block3", "block4", "block5")


def build_decoder(
    variant: str,
    taps: dict[str, tuple[str, int]],
    num_classes: int,
    channels: int = 32,
    kernel: int = 8,
    stride: int = 4,
    padding: int = 2,
) -> Fragment:
    """Project each tap to ``channels``, resize to the finest tap, concat, deconvolve."""
    blocks = decoder_tap_blocks(variant)
    nodes: list[LayerNode] = []
    branches = []
    for blk in blocks:
        src, cin = taps[blk]
        part = _cbr(f"dec.{blk}", src, cin, channels, 3, 1, "decoder")
        nodes += part
        branches.append(part[-1].id)
    anchor = branches[0]
    inputs = [anchor]
    for blk, branch in zip(blocks[1:], branches[1:]):
        nodes.append(LayerNode(f"dec.{blk}.up", "resize", (branch,), {"like": anchor}, "decoder"))
        inputs.append(nodes[-1].id)
    concat_ch = channels * len(blocks)
    nodes.append(LayerNode("dec.concat", "concat", tuple(inputs), {}, "decoder"))
    nodes.append(
        LayerNode(
            "dec.deconv",
            "deconv",
            ("dec.concat",),
            {"in_channels": concat_ch, "out_channels": num_classes, "kernel": kernel, "stride": stride, "padding": padding},
            "decoder",
        )
    )
    return Fragment(nodes, "dec.deconv", num_classes)


def _input_node(cfg: NetworkConfig) -> LayerNode:
    return LayerNode("image", "input", (), {"channels": cfg.in_channels}, "input")


def build_graph(cfg: NetworkConfig) -> GraphSpec:
    enc = build_encoder(cfg)
    dec = build_decoder(
        cfg.variant,
        enc.taps,
        cfg.num_classes,
        cfg.decoder_channels,
        cfg.deconv_kernel,
        cfg.deconv_stride,
        cfg.deconv_padding,
    )
    graph = GraphSpec(
        nodes=(_input_node(cfg), *enc.nodes, *dec.nodes),
        input_id="image",
        output_id=dec.out,
        variant=cfg.variant,
        num_classes=cfg.num_classes,
        config=cfg.to_json(),
    )
    validate_graph(graph, (cfg.in_channels, 2 * cfg.minimum_stride, 2 * cfg.minimum_stride))
    return graph


def build_dsnet(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> tuple[GraphSpec, ParamStore]:
    graph = build_graph(cfg)
    return graph, init_params(graph, RngState(seed), dtype)


def attach_classifier_head(encoder: Fragment, cfg: NetworkConfig, num_classes: int = 1000) -> GraphSpec:
    """Block5 -> global average pool -> fully connected (1x1 conv) -> class logits."""
    if "block5" not in encoder.taps or encoder.out != encoder.taps["block5"][0]:
        raise ConfigError("classifier head must attach to an encoder ending at Block5")
    ch = encoder.channels
    head = [
        LayerNode("head.gap", "gap", (encoder.out,), {}, "head"),
        LayerNode(
            "head.fc",
            "conv",
            ("head.gap",),
            {"in_channels": ch, "out_channels": num_classes, "kernel": 1, "stride": 1, "padding": 0},
            "head",
        ),
    ]
    config = cfg.to_json()
    config["num_classes"] = num_classes
    graph = GraphSpec(
        nodes=(_input_node(cfg), *encoder.nodes, *head),
        input_id="image",
        output_id="head.fc",
        variant="classifier",
        num_classes=num_classes,
        config=config,
    )
    validate_graph(graph, (cfg.in_channels, 2 * cfg.minimum_stride, 2 * cfg.minimum_stride))
    return graph


def build_classifier(cfg: NetworkConfig, num_classes: int = 1000, seed: int = 0, dtype=np.float32) -> tuple[GraphSpec, ParamStore]:
    graph = attach_classifier_head(build_encoder(cfg), cfg, num_classes)
    return graph, init_params(graph, RngState(seed), dtype)


def graph_config(graph: GraphSpec) -> NetworkConfig:
    return NetworkConfig.from_json(graph.config)


def with_dropout(graph: GraphSpec, rate: float) -> GraphSpec:
    """Rebuild ``graph`` with dropout ``rate`` at the end of every dense unit.

    Node ids of parameterized layers are unchanged, so an existing
    ParamStore stays valid.
    """
    cfg = graph_config(graph)
    if cfg.dropout_rate == rate:
        return graph
    cfg = NetworkConfig.from_json({**cfg.to_json(), "dropout_rate": rate})
    if graph.variant == "classifier":
        return attach_classifier_head(build_encoder(cfg), cfg, graph.num_classes)
    return build_graph(cfg)
