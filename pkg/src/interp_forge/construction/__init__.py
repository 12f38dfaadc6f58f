"""Explicit transformers that interpolate a sequence-to-sequence dataset."""

from .common import ConstructionError, ConstructionReport
from .hardmax import (
    build_collapse,
    build_hardmax,
    build_interpolation,
    build_leader_selection,
    build_separation,
    hardmax_bound,
)
from .softmax import CalibrationError, SoftmaxPlan, build_softmax, calibrate_tau, collapse_ff, softmax_bound

__all__ = [
    "ConstructionError",
    "ConstructionReport",
    "build_collapse",
    "build_hardmax",
    "build_interpolation",
    "build_leader_selection",
    "build_separation",
    "hardmax_bound",
    "build_softmax",
    "calibrate_tau",
    "collapse_ff",
    "softmax_bound",
    "CalibrationError",
    "SoftmaxPlan",
]
