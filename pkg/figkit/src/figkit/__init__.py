"""Figures for finite-volume Monte Carlo runs: error plots, heatmaps, slices."""

from .payload import FieldPayload, PayloadError, CsvError, read_metrics_csv, read_payload
from .plots import diagonal_slice, plot_diagonal, plot_errors, plot_heatmap

__version__ = "0.1.0"
