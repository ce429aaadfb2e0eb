from .benchmark import BenchmarkConfig, BenchmarkResult, run_ablation, run_benchmark
from .episode import SimLog, SimulatorConfig, evaluate_log, load_simlog, run_episode, save_simlog
from .scenarios import GeneratorParams, generate_scenario, generate_suite

__all__ = [
    "BenchmarkConfig",
    "BenchmarkResult",
    "GeneratorParams",
    "SimLog",
    "SimulatorConfig",
    "evaluate_log",
    "generate_scenario",
    "generate_suite",
    "load_simlog",
    "run_ablation",
    "run_benchmark",
    "run_episode",
    "save_simlog",
]
