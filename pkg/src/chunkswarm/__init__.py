"""Slotted simulator and analysis toolkit for privacy-hardened swarm dissemination of
federated-learning updates."""

from .attacks import ATTACKS, asr, collude, run_attacks
from .config import ConfigError, FaultSpec, RoundConfig, load_config
from .harness import MetricsReport, emit_report, run_experiment, run_sweep, with_defenses
from .maxflow import build_stage_network, max_flow, stage_bound
from .overlay import generate_overlay, verify_round_log

__version__ = "0.1.0"

__all__ = [
    "ATTACKS", "asr", "collude", "run_attacks", "ConfigError", "FaultSpec", "RoundConfig",
    "load_config", "MetricsReport", "emit_report", "run_experiment", "run_sweep", "with_defenses",
    "build_stage_network", "max_flow", "stage_bound", "generate_overlay", "verify_round_log",
    "__version__",
]
