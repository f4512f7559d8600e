"""Surgical phase recognition from tool presence: recurrent phase models,
a multi-label tool head, evaluation metrics, data preparation and a
synthetic workflow generator."""

from .dataio import N_PHASES, N_TOOLS, PHASE_NAMES, TOOL_NAMES
from .metrics import MetricsReport
from .pipeline import RunConfig, infer_phases, make_windows, train_phase_model, train_tool_head
from .recurrent import RecurrentModel, backward_sequence, forward_sequence, init_model

__version__ = "0.1.0"
