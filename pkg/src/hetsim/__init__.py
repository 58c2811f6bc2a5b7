"""Cycle-level simulator for batched LLM decode on a heterogeneous
accelerator: a systolic-array NPU over HBM channels whose banks carry
per-bank GEMV units behind dual row buffers."""

from .config import (
    ConfigError, DATASET_PRESETS, HardwareConfig, MODEL_PRESETS, ModelConfig,
    TimingParams, WorkloadSpec, dump_config, load_config, loads_config,
)
from .engine import (
    ExecutionMode, Metrics, SimParams, Simulation, StageTimeline,
    mha_head_pipeline, model_parallel_run, npu_only, overlap, pim_blocked,
    run_iteration,
)
from .scheduler import (
    BatchScheduler, KvPageTable, MhaParams, Request, estimate_mha_latency,
    pack_channels, partition_subbatches,
)
from .workload import load_length_dataset, synthesize_requests, warmup_batch

__all__ = [
    "ConfigError", "DATASET_PRESETS", "HardwareConfig", "MODEL_PRESETS",
    "ModelConfig", "TimingParams", "WorkloadSpec", "dump_config",
    "load_config", "loads_config",
    "ExecutionMode", "Metrics", "SimParams", "Simulation", "StageTimeline",
    "mha_head_pipeline", "model_parallel_run", "npu_only", "overlap",
    "pim_blocked", "run_iteration",
    "BatchScheduler", "KvPageTable", "MhaParams", "Request",
    "estimate_mha_latency", "pack_channels", "partition_subbatches",
    "load_length_dataset", "synthesize_requests", "warmup_batch",
]
