"""DSNet graph construction, static analysis and batch-norm folding."""

from .analysis import analyze, concat_width, count_flops, count_parameters, count_units, receptive_field, units_per_block
from .builder import (
    ConfigError,
    DenseUnitConfig,
    Fragment,
    NetworkConfig,
    attach_classifier_head,
    build_classifier,
    build_decoder,
    build_dense_unit,
    build_dsnet,
    build_encoder,
    build_graph,
    build_initial_block,
    build_transition,
    graph_config,
    with_dropout,
)
from .fold import FoldError, fold_batch_norm, fold_conv_bn
from .graph import (
    ConvParams,
    GraphError,
    GraphSpec,
    LayerNode,
    ParamError,
    ParamStore,
    check_params,
    forward,
    infer_shapes,
    init_params,
    validate_graph,
)

__all__ = [
    "ConfigError",
    "ConvParams",
    "DenseUnitConfig",
    "FoldError",
    "Fragment",
    "GraphError",
    "GraphSpec",
    "LayerNode",
    "NetworkConfig",
    "ParamError",
    "ParamStore",
    "analyze",
    "attach_classifier_head",
    "build_classifier",
    "build_decoder",
    "build_dense_unit",
    "build_dsnet",
    "build_encoder",
    "build_graph",
    "build_initial_block",
    "build_transition",
    "check_params",
    "concat_width",
    "count_flops",
    "count_parameters",
    "count_units",
    "fold_batch_norm",
    "fold_conv_bn",
    "forward",
    "graph_config",
    "infer_shapes",
    "init_params",
    "receptive_field",
    "units_per_block",
    "validate_graph",
    "with_dropout",
]
