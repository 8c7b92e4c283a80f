"""Experiment plans, case execution with caching, and reporting."""
from .cache import gc_cache, verify_cache
from .execute import (ExperimentCase, ResultRecord, Runner, case_keys, enumerate_cases, fine_tune_schedule,
                      plan_cache_keys, run_attacks, run_plan, write_store)
from .plan import ExperimentPlan, parse_simulation_file
from .report import emit_report, grid_text, read_store, results_csv, spread_rows

__all__ = [
    "ExperimentCase", "ExperimentPlan", "ResultRecord", "Runner", "case_keys", "emit_report",
    "enumerate_cases", "fine_tune_schedule", "gc_cache", "grid_text", "parse_simulation_file",
    "plan_cache_keys", "read_store", "results_csv", "run_attacks", "run_plan", "spread_rows",
    "verify_cache", "write_store",
]
