"""Planner, simulator and verifier for micro-batch pipeline parallelism over U-Net-shaped networks."""

from .executor import backward_serial, check_grad_finite_difference, forward_serial, run_pipeline
from .ir import LayerSpec, ModelGraph, UNetConfig, build_unet, total_cost, validate_graph
from .partition import Partition, partition_balanced, partition_fixed
from .sequentialize import Cell, SequentialModel, passthrough_memory_overhead, sequentialize
from .sim import ScheduleConfig, estimate_memory, simulate_dependency_schedule, simulate_gpipe, steady_state_throughput

__version__ = "0.1.0"

__all__ = [
    "Cell",
    "LayerSpec",
    "ModelGraph",
    "Partition",
    "ScheduleConfig",
    "SequentialModel",
    "UNetConfig",
    "backward_serial",
    "build_unet",
    "check_grad_finite_difference",
    "estimate_memory",
    "forward_serial",
    "partition_balanced",
    "partition_fixed",
    "passthrough_memory_overhead",
    "run_pipeline",
    "sequentialize",
    "simulate_dependency_schedule",
    "simulate_gpipe",
    "steady_state_throughput",
    "total_cost",
    "validate_graph",
]
