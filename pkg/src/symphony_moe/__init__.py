"""Sparse mixture-of-experts routing smoothed by an expert co-selection graph."""

from importlib.resources import files

from .errors import (
    ArgumentError,
    DimensionError,
    DivergenceError,
    FrozenError,
    NumericalError,
    StateError,
    SymphonyError,
)
from .graph import AdjacencyState, ComplexityEstimate, NormMode, SpectralReport, estimate_overhead, spectral_report
from .layer import ExpertSet, LayerOutput, MoELayer, RoutingMode, load_balance_loss, load_balance_report
from .router import (
    GateDistribution,
    RouterKind,
    RouterParams,
    SelectionRecord,
    TokenBatch,
    compute_scores,
    smoe_gate_logits_first,
    smoe_gate_softmax_first,
    softmax,
    topk_indices,
    topk_select,
)

__version__ = "0.1.0"


def fixture_path(name: str):
    return files(__package__) / "fixtures" / name


__all__ = [
    "AdjacencyState", "ArgumentError", "ComplexityEstimate", "DimensionError", "DivergenceError", "ExpertSet",
    "FrozenError", "GateDistribution", "LayerOutput", "MoELayer", "NormMode", "NumericalError", "RouterKind",
    "RouterParams", "RoutingMode", "SelectionRecord", "SpectralReport", "StateError", "SymphonyError", "TokenBatch",
    "compute_scores", "estimate_overhead", "fixture_path", "load_balance_loss", "load_balance_report",
    "smoe_gate_logits_first", "smoe_gate_softmax_first", "softmax", "spectral_report", "topk_indices", "topk_select",
]
