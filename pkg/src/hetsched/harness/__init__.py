"""Experiment harness: configuration, orchestration, reports and the CLI."""
from .config import ExperimentConfig, InstanceSpec, load_config
from .report import EpisodeRecord, emit_report, summarize
from .runner import make_instances, reference_schedule, run_scheduler

__all__ = ["ExperimentConfig", "InstanceSpec", "load_config", "EpisodeRecord", "emit_report",
           "summarize", "make_instances", "reference_schedule", "run_scheduler"]
