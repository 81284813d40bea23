from .base import DetectorOutput, hard_decision, ser, symbol_errors, wilson_halfwidth, wilson_interval
from .classical import bp_detect, map_detect_bruteforce, mmse_detect, mmse_estimate
from .gnn import EgnnParams, GnnArchitecture, edge_messages, gnn_forward, loss_and_grad

__all__ = [
    "DetectorOutput",
    "EgnnParams",
    "GnnArchitecture",
    "bp_detect",
    "edge_messages",
    "gnn_forward",
    "hard_decision",
    "loss_and_grad",
    "map_detect_bruteforce",
    "mmse_detect",
    "mmse_estimate",
    "ser",
    "symbol_errors",
    "wilson_halfwidth",
    "wilson_interval",
]
