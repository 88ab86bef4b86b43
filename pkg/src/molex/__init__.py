"""Mixture of layer experts: upcycling a residual network's own layers as routed experts."""
from .backbone import BackboneConfig, LoraAdapter, layer_forward
from .ensemble import LinearStack, certify_ensemble, certify_single, molex_vs_sequential, unroll
from .model import MolexModel
from .routing import GateConfig, Router, SelectionStats, export_selection_stats, molex_forward

__version__ = "0.1.0"
