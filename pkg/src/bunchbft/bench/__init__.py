from .config import BenchConfig, load_config
from .deploy import Deployment, build
from .report import MetricsReport, MismatchedWorkload, collect, compare, run_bench, write_outputs

__all__ = ["BenchConfig", "Deployment", "MetricsReport", "MismatchedWorkload", "build", "collect", "compare",
           "load_config", "run_bench", "write_outputs"]
