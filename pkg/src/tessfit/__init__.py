"""Fit Voronoi, Laguerre and (diagonal) generalized balanced power diagrams to voxel grain maps."""

from .diagram import (
    Generator,
    LabelField,
    ModelKind,
    Tessellation,
    assign,
    facet_distance_laguerre,
    power_distance,
)
from .grid import GrainMap, load_grain_map, save_grain_map
from .heuristics import fit_h0, fit_hq
from .metrics import MetricTable, evaluate

__all__ = [
    "Generator",
    "GrainMap",
    "LabelField",
    "MetricTable",
    "ModelKind",
    "Tessellation",
    "assign",
    "evaluate",
    "facet_distance_laguerre",
    "fit_h0",
    "fit_hq",
    "load_grain_map",
    "power_distance",
    "save_grain_map",
]
