"""Benchmark harness: workloads, closed-loop driver, history and checker."""

from .checker import Verdict, check_history
from .config import BenchConfig, ConfigError, load_config
from .driver import RunMetrics, RunResult, run_benchmark
from .history import History, MalformedHistory, load_history, save_history

__all__ = [
    "BenchConfig", "ConfigError", "History", "MalformedHistory", "RunMetrics", "RunResult",
    "Verdict", "check_history", "load_config", "load_history", "run_benchmark", "save_history",
]
