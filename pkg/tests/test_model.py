import json
from pathlib import Path

import numpy as np
import pytest
from conftest import toy_config
from hypothesis import given
from hypothesis import strategies as st
from oracles import dsnet_arithmetic

from dsnet.engine import TRAIN, BatchNormParams, RngState, Tensor
from dsnet.model import (
    ConfigError,
    ConvParams,
    DenseUnitConfig,
    FoldError,
    GraphError,
    GraphSpec,
    LayerNode,
    NetworkConfig,
    ParamError,
    analyze,
    attach_classifier_head,
    build_classifier,
    build_dense_unit,
    build_dsnet,
    build_encoder,
    build_initial_block,
    build_transition,
    check_params,
    concat_width,
    count_flops,
    count_parameters,
    count_units,
    fold_batch_norm,
    fold_conv_bn,
    forward,
    infer_shapes,
    init_params,
    receptive_field,
    units_per_block,
    validate_graph,
    with_dropout,
)

GOLDEN = Path(__file__).parent / "golden"


def conv_node(id, src, cin, cout, k, s=1, p=0):
    return LayerNode(id, "conv", (src,), {"in_channels": cin, "out_channels": cout, "kernel": k, "stride": s, "padding": p})


def chain(*nodes, channels=1):
    return GraphSpec((LayerNode("x", "input", (), {"channels": channels}), *nodes), "x", nodes[-1].id, "fast", 1)


def fragment_shapes(frag, in_shape):
    graph = GraphSpec((LayerNode("image", "input", (), {"channels": in_shape[1]}), *frag.nodes), "image", frag.out, "fast", 1)
    return infer_shapes(graph, in_shape)


class TestInitialBlock:
    def test_fast_halves(self):
        frag = build_initial_block("fast")
        assert fragment_shapes(frag, (1, 3, 512, 1024))[frag.out] == (1, 32, 256, 512)

    def test_accurate_keeps_resolution(self):
        frag = build_initial_block("accurate")
        assert fragment_shapes(frag, (1, 3, 360, 480))[frag.out] == (1, 32, 360, 480)

    @pytest.mark.parametrize("variant", ["fast", "accurate"])
    def test_thirty_two_channels(self, variant):
        assert build_initial_block(variant).channels == 32

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            build_initial_block("medium")


class TestDenseUnit:
    def test_non_bottleneck_width(self):
        assert build_dense_unit("x", 32, DenseUnitConfig(32, False), "u").channels == 64

    def test_bottleneck_internal_widths(self):
        unit = build_dense_unit("x", 56, DenseUnitConfig(32, True, 128), "u")
        convs = [n.hparams["out_channels"] for n in unit.nodes if n.op == "conv"]
        assert convs == [128, 32, 32]
        assert unit.channels == 88

    def test_stage_order_is_conv_bn_relu(self):
        unit = build_dense_unit("x", 8, DenseUnitConfig(4, True, 8), "u")
        ops = [n.op for n in unit.nodes]
        assert ops == ["conv", "bn", "relu"] * 3 + ["concat"]

    def test_concat_keeps_input_first(self):
        unit = build_dense_unit("x", 8, DenseUnitConfig(4), "u")
        assert unit.nodes[-1].inputs[0] == "x"

    def test_dropout_before_concat(self):
        unit = build_dense_unit("x", 8, DenseUnitConfig(4), "u", dropout_rate=0.1)
        assert [n.op for n in unit.nodes[-2:]] == ["dropout", "concat"]


class TestTransition:
    @pytest.mark.parametrize("cin,expected", [(96, 48), (312, 156)])
    def test_half_compression(self, cin, expected):
        frag = build_transition("image", cin, 0.5, "t")
        assert frag.channels == expected
        assert fragment_shapes(frag, (1, cin, 8, 8))[frag.out] == (1, expected, 4, 4)

    def test_no_compression(self):
        assert build_transition("x", 96, 1.0, "t").channels == 96


class TestEncoder:
    def test_block_channels(self):
        enc = build_encoder(NetworkConfig())
        assert [enc.taps[f"block{i}"][1] for i in range(1, 6)] == [96, 112, 312, 476, 494]

    def test_matches_arithmetic_oracle(self):
        enc = build_encoder(NetworkConfig())
        assert [enc.taps[f"block{i}"][1] for i in range(1, 6)] == dsnet_arithmetic("fast", 19, 64, 64)["block_channels"]

    @pytest.mark.parametrize("variant,strides", [("fast", (4, 8, 16, 32)), ("accurate", (2, 4, 8, 16))])
    def test_tap_strides(self, variant, strides):
        cfg = NetworkConfig(variant=variant)
        graph, _ = build_dsnet(cfg)
        enc = build_encoder(cfg)
        got = tuple(receptive_field(graph, enc.taps[f"block{b}"][0])["stride_h"] for b in (2, 3, 4, 5))
        assert got == strides

    def test_tap_shapes_fast(self, canonical_fast):
        graph, _ = canonical_fast
        shapes = infer_shapes(graph, (1, 3, 512, 1024))
        enc = build_encoder(NetworkConfig())
        assert shapes[enc.taps["block2"][0]][2:] == (128, 256)
        assert shapes[enc.taps["block5"][0]][2:] == (16, 32)


class TestNetwork:
    def test_concat_width_fast(self, canonical_fast):
        assert concat_width(canonical_fast[0]) == 128

    def test_concat_width_accurate(self, canonical_accurate):
        assert concat_width(canonical_accurate[0]) == 96

    def test_fast_shapes(self, canonical_fast):
        shapes = infer_shapes(canonical_fast[0], (1, 3, 512, 1024))
        assert shapes["dec.concat"] == (1, 128, 128, 256)
        assert shapes["dec.deconv"] == (1, 19, 512, 1024)

    def test_accurate_shape(self, canonical_accurate):
        assert infer_shapes(canonical_accurate[0], (1, 3, 360, 480))["dec.deconv"] == (1, 11, 360, 480)

    @pytest.mark.parametrize("fixture", ["canonical_fast", "canonical_accurate"])
    def test_unit_counts(self, request, fixture):
        graph = request.getfixturevalue(fixture)[0]
        assert count_units(graph) == {"non_bottleneck": 4, "bottleneck": 26}
        assert units_per_block(graph) == {1: 2, 2: 2, 3: 8, 4: 10, 5: 8}

    def test_every_conv_followed_by_bn_then_relu(self, canonical_fast):
        graph = canonical_fast[0]
        consumers = graph.consumers()
        for node in graph.by_op("conv"):
            (bn,) = consumers[node.id]
            assert graph[bn].op == "bn"
            (r,) = consumers[bn]
            assert graph[r].op == "relu"

    def test_real_forward_toy(self, toy_fast, toy_accurate):
        for graph, params in (toy_fast, toy_accurate):
            x = np.random.default_rng(0).random((2, 3, 64, 96)).astype(np.float32)
            assert forward(graph, params, x).shape == (2, 3, 64, 96)

    def test_same_seed_same_params(self):
        _, a = build_dsnet(toy_config(), seed=5)
        _, b = build_dsnet(toy_config(), seed=5)
        _, c = build_dsnet(toy_config(), seed=6)
        arrays = lambda p: [v for _, v in sorted(p.arrays().items())]  # noqa: E731
        assert all(np.array_equal(u, v) for u, v in zip(arrays(a), arrays(b)))
        assert not all(np.array_equal(u, v) for u, v in zip(arrays(a), arrays(c)))

    def test_json_round_trip(self, toy_fast):
        graph = toy_fast[0]
        assert GraphSpec.from_json(json.loads(json.dumps(graph.to_json()))) == graph

    def test_with_dropout_adds_one_node_per_unit(self):
        graph = with_dropout(build_dsnet(toy_config())[0], 0.1)
        assert len(graph.by_op("dropout")) == 5
        assert with_dropout(graph, 0.0).by_op("dropout") == []

    @pytest.mark.parametrize(
        "overrides",
        [{"variant": "slow"}, {"num_classes": 0}, {"block_units": (1, 1, 1, 1)}, {"compression": 0}, {"dropout_rate": 1.0}],
    )
    def test_bad_config(self, overrides):
        with pytest.raises(ConfigError):
            NetworkConfig(**overrides)

    def test_config_round_trip(self):
        cfg = NetworkConfig(variant="accurate", num_classes=11, dropout_rate=0.1)
        assert NetworkConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg


class TestClassifierHead:
    def test_head_parameters(self):
        cfg = NetworkConfig()
        graph, params = build_classifier(cfg, 1000)
        head = params["head.fc"]
        assert head.weight.data.size + head.bias.data.size == 494 * 1000 + 1000

    def test_output_is_global(self):
        cfg = toy_config()
        graph, params = build_classifier(cfg, 7)
        for size in ((64, 64), (96, 160)):
            x = np.random.default_rng(0).random((2, 3, *size)).astype(np.float32)
            assert forward(graph, params, x).shape == (2, 7, 1, 1)

    def test_absent_from_segmentation(self, canonical_fast):
        assert not any(n.scope == "head" for n in canonical_fast[0].nodes)

    def test_requires_block5(self):
        cfg = toy_config()
        enc = build_encoder(cfg)
        enc.out = enc.taps["block4"][0]
        with pytest.raises(ConfigError):
            attach_classifier_head(enc, cfg)


class TestCounting:
    def test_single_conv(self):
        graph = chain(conv_node("c", "x", 3, 32, 3, 1, 1), channels=3)
        params = init_params(graph, RngState(0))
        assert count_parameters(graph, params)["total_count"] == 896

    def test_one_by_one_macs(self):
        graph = chain(conv_node("c", "x", 64, 32, 1), channels=64)
        assert count_flops(graph, (64, 8, 8))["per_node"]["c"] == 131072

    def test_identity_ops_are_free(self, toy_fast):
        graph = toy_fast[0]
        per = count_flops(graph, (3, 64, 64))["per_node"]
        for node in graph.nodes:
            if node.op in ("relu", "concat", "input", "dropout"):
                assert per[node.id] == 0

    @pytest.mark.parametrize("name", ["analyze_fast_19", "analyze_fast_11", "analyze_accurate_11"])
    def test_golden(self, name):
        golden = json.loads((GOLDEN / f"{name}.json").read_text())
        cfg = NetworkConfig(variant=golden["variant"], num_classes=golden["num_classes"])
        graph, params = build_dsnet(cfg)
        report = analyze(graph, params, golden["input_shape"])
        for key, value in golden.items():
            assert report[key] == value, key

    @pytest.mark.parametrize("variant,nc,target", [("fast", 19, 11.9), ("fast", 11, 11.9), ("accurate", 11, 11.6)])
    def test_size_within_ten_percent(self, variant, nc, target):
        graph, params = build_dsnet(NetworkConfig(variant=variant, num_classes=nc))
        mb = count_parameters(graph, params)["megabytes"]
        assert abs(mb - target) / target <= 0.10

    @given(st.sampled_from(["fast", "accurate"]), st.integers(1, 40), st.integers(1, 4), st.integers(1, 4))
    def test_counts_match_oracle(self, variant, nc, hm, wm):
        stride = 32 if variant == "fast" else 16
        h, w = hm * stride, wm * stride
        graph = build_dsnet(NetworkConfig(variant=variant, num_classes=nc))[0]
        oracle = dsnet_arithmetic(variant, nc, h, w)
        assert count_flops(graph, (3, h, w))["total"] == oracle["macs"]


class TestReceptiveField:
    def test_single(self):
        assert receptive_field(chain(conv_node("a", "x", 1, 1, 3, 1, 1)), "a")["rf_h"] == 3

    def test_two_stacked(self):
        g = chain(conv_node("a", "x", 1, 1, 3, 1, 1), conv_node("b", "a", 1, 1, 3, 1, 1))
        assert receptive_field(g, "b")["rf_h"] == 5

    def test_strided_then_plain(self):
        g = chain(conv_node("a", "x", 1, 1, 3, 2, 1), conv_node("b", "a", 1, 1, 3, 1, 1))
        rf = receptive_field(g, "b")
        assert rf["rf_h"] == 7 and rf["stride_h"] == 2

    def test_global_pool_is_unbounded(self):
        g = chain(conv_node("a", "x", 1, 1, 3, 1, 1), LayerNode("g", "gap", ("a",), {}))
        assert receptive_field(g, "g")["rf_h"] == float("inf")

    def test_monotone_along_encoder(self, canonical_fast):
        graph = canonical_fast[0]
        enc = build_encoder(NetworkConfig())
        rfs = [receptive_field(graph, enc.taps[f"block{b}"][0])["rf_h"] for b in range(1, 6)]
        assert rfs == sorted(rfs) and len(set(rfs)) == 5

    def test_unknown_node(self, toy_fast):
        with pytest.raises(GraphError):
            receptive_field(toy_fast[0], "nope")


class TestValidation:
    def test_forward_reference(self):
        g = GraphSpec(
            (LayerNode("x", "input", (), {"channels": 1}), LayerNode("r", "relu", ("y",)), LayerNode("y", "relu", ("x",))),
            "x",
            "r",
            "fast",
            1,
        )
        with pytest.raises(GraphError):
            validate_graph(g)

    def test_dangling_node(self):
        g = GraphSpec(
            (LayerNode("x", "input", (), {"channels": 1}), LayerNode("a", "relu", ("x",)), LayerNode("b", "relu", ("x",))),
            "x",
            "a",
            "fast",
            1,
        )
        with pytest.raises(GraphError, match="does not reach"):
            validate_graph(g)

    def test_param_shape_mismatch(self, toy_fast):
        graph, params = toy_fast
        params["init.conv"] = ConvParams(Tensor(np.zeros((8, 3, 1, 1), np.float32)), Tensor(np.zeros(8, np.float32)))
        with pytest.raises(ParamError):
            check_params(graph, params)


def _train_stats(graph, params, steps=3):
    """Populate BN running statistics with a few train-mode passes."""
    data = np.random.default_rng(9)
    for _ in range(steps):
        forward(graph, params, data.random((2, 3, 64, 64)).astype(np.float32), mode=TRAIN)


class TestFold:
    def test_identity_bn_keeps_weights(self, rng):
        conv = ConvParams(Tensor(rng.standard_normal((4, 3, 3, 3))), Tensor(rng.standard_normal(4)))
        bn = BatchNormParams(Tensor(np.ones(4)), Tensor(np.zeros(4)), np.zeros(4), np.full(4, 1 - 1e-5))
        folded = fold_conv_bn(conv, bn)
        np.testing.assert_allclose(folded.weight.data, conv.weight.data, rtol=1e-15)
        np.testing.assert_allclose(folded.bias.data, conv.bias.data, rtol=1e-15)

    def test_formula(self, rng):
        w, b = rng.standard_normal((2, 1, 1, 1)), rng.standard_normal(2)
        g, be, m, v = rng.random(2) + 0.5, rng.standard_normal(2), rng.standard_normal(2), rng.random(2) + 0.1
        folded = fold_conv_bn(ConvParams(Tensor(w), Tensor(b)), BatchNormParams(Tensor(g), Tensor(be), m, v))
        for c in range(2):
            scale = g[c] / np.sqrt(v[c] + 1e-5)
            assert folded.weight.data[c, 0, 0, 0] == pytest.approx(w[c, 0, 0, 0] * scale, rel=1e-14)
            assert folded.bias.data[c] == pytest.approx((b[c] - m[c]) * scale + be[c], rel=1e-14)

    @pytest.mark.parametrize("variant", ["fast", "accurate"])
    def test_equivalence(self, variant):
        graph, params = build_dsnet(toy_config(variant), seed=1)
        _train_stats(graph, params)
        fgraph, fparams = fold_batch_norm(graph, params)
        data = np.random.default_rng(3)
        for _ in range(5):
            x = data.random((1, 3, 64, 64)).astype(np.float32)
            diff = np.abs(forward(graph, params, x).data - forward(fgraph, fparams, x).data).max()
            assert diff < 1e-5

    def test_no_bn_and_fewer_macs(self, canonical_fast):
        graph, params = canonical_fast
        fgraph, fparams = fold_batch_norm(graph, params)
        assert fgraph.by_op("bn") == []
        assert count_flops(fgraph, (3, 64, 64))["total"] < count_flops(graph, (3, 64, 64))["total"]
        assert count_parameters(fgraph, fparams)["total_count"] < count_parameters(graph, params)["total_count"]

    def test_does_not_touch_original(self, toy_fast):
        graph, params = toy_fast
        before = {k: v.copy() for k, v in params.arrays().items()}
        fold_batch_norm(graph, params)
        assert all(np.array_equal(before[k], v) for k, v in params.arrays().items())

    def test_refuses_bn_without_conv(self):
        g = chain(LayerNode("r", "relu", ("x",)), LayerNode("b", "bn", ("r",), {"channels": 1, "eps": 1e-5, "momentum": 0.1}))
        params = init_params(g, RngState(0))
        with pytest.raises(FoldError):
            fold_batch_norm(g, params)

    def test_refuses_bad_statistics(self, toy_fast):
        graph, params = toy_fast
        params["init.bn"].running_var[0] = np.nan
        with pytest.raises(FoldError, match="running statistics"):
            fold_batch_norm(graph, params)
