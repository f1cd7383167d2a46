"""Experiment orchestration: datasets, sweeps, classification and plots."""

from .classify import naive_bayes
from .data import Dataset, augment_scale, export, ingest
from .plot import emit_plot
from .sweep import SweepConfig, run_sweep

__all__ = ["Dataset", "SweepConfig", "augment_scale", "emit_plot", "export", "ingest", "naive_bayes", "run_sweep"]
