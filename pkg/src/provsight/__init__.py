"""Provenance-graph intrusion detection toolkit.

Build provenance graphs from audit events, score nodes by how far their
neighbourhood structure lies from anything seen in training, filter routine
alerts by process community, and evaluate the result on labelled synthetic
traces.
"""

__version__ = "0.1.0"

from .events import ActionKind, EntityAttrs, EntityKind, Event, Label, read_trace, write_trace
from .graph import DEFAULT, PRESETS, ProvGraph, UuidStrategy, build, strategy_for
from .detector import DetectorModel, Verdict, detect, train
from .fp_reduction import reduce_false_positives
from .metrics import EvalReport, auc, evaluate, pearson

__all__ = [
    "ActionKind", "EntityAttrs", "EntityKind", "Event", "Label", "read_trace", "write_trace",
    "DEFAULT", "PRESETS", "ProvGraph", "UuidStrategy", "build", "strategy_for",
    "DetectorModel", "Verdict", "detect", "train",
    "reduce_false_positives",
    "EvalReport", "auc", "evaluate", "pearson",
]
