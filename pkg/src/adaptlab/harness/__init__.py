"""Experiment harness: configs, benchmark directories, runs, reports, gradient checks."""
from .bench import Benchmark, benchmark_from_spec, load_benchmark, write_benchmark
from .config import DEFAULT_CONFIG, ExperimentConfig, default_config, load_config, parse_config
from .gradcheck import cmd_gradcheck, run_battery
from .report import cmd_report, render_report
from .runner import CSV_HEADER, ResultRow, cell_seed, cmd_run, read_results

__all__ = [
    "Benchmark", "benchmark_from_spec", "load_benchmark", "write_benchmark",
    "DEFAULT_CONFIG", "ExperimentConfig", "default_config", "load_config", "parse_config",
    "cmd_gradcheck", "run_battery", "cmd_report", "render_report",
    "CSV_HEADER", "ResultRow", "cell_seed", "cmd_run", "read_results",
]
