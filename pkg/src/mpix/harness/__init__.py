"""Benchmark and verification harness."""

from .config import RunConfig, build_config, load_config
from .patterns import generate_pattern
from .runner import CSV_COLUMNS, RunReport, run
