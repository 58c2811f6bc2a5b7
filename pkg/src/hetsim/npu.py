"""Cycle-cost model for the NPU: GEMM on systolic arrays, element-wise
ops on the SIMD vector units.

The GEMM model is a closed-form output-stationary tile model rather than
a PE-level simulation: one tile of (M_t, N_t, K) costs K + M_t + N_t
cycles (full reduction plus pipeline fill and drain, operands
double-buffered).  Total time is the roofline max of compute and memory
time at whatever bandwidth the memory system currently grants.
"""

from __future__ import annotations

from dataclasses import dataclass

from .graph import GEMM_KINDS, VECTOR_KINDS, VECTOR_OP_COST, OperatorNode


class NpuModelError(ValueError):
    pass


@dataclass(frozen=True)
class Tile:
    m: int
    n: int
    k: int


@dataclass
class NpuJob:
    node: OperatorNode
    tiles: list[Tile]
    weight_bytes: int
    activation_bytes: int
    output_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.weight_bytes + self.activation_bytes + self.output_bytes


def tile_gemm(node: OperatorNode, sa_dim: int) -> list[Tile]:
    """Output-stationary tiling: ceil(M/sa) x ceil(N/sa) tiles, each with
    the full K reduction; edge tiles carry the remainder dims."""
    if node.kind not in GEMM_KINDS:
        raise NpuModelError(f"{node.kind} is not a GEMM (GEMVs run on the PIM side)")
    m, n, k = node.shape
    tiles = []
    for mi in range(0, m, sa_dim):
        for ni in range(0, n, sa_dim):
            tiles.append(Tile(min(sa_dim, m - mi), min(sa_dim, n - ni), k))
    return tiles


def gemm_tile_cycles(tile: Tile) -> int:
    """K reduction streamed through the array plus fill/drain of the edges."""
    return tile.k + tile.m + tile.n


def make_job(node: OperatorNode, sa_dim: int, data_width: int,
             count_weights: bool = True) -> NpuJob:
    """Tile a GEMM node and attach its memory traffic.

    ``count_weights=False`` drops the K*N weight term for a pass that
    reuses weights already streamed this iteration (second sub-batch).
    """
    m, n, k = node.shape
    tiles = tile_gemm(node, sa_dim)
    weight = data_width * k * n if count_weights else 0
    return NpuJob(node, tiles, weight, data_width * m * k, data_width * m * n)


def job_compute_cycles(job: NpuJob, sa_count: int) -> int:
    total = sum(gemm_tile_cycles(t) for t in job.tiles)
    return -(-total // sa_count)


def npu_compute_time(job: NpuJob, sa_count: int, available_bw: float) -> int:
    """Roofline max of compute time and memory time for one GEMM job."""
    if available_bw <= 0:
        raise NpuModelError("available_bw must be > 0")
    compute = job_compute_cycles(job, sa_count)
    memory = -(-job.total_bytes // int(available_bw))
    return max(compute, memory)


def vector_op_cycles(node: OperatorNode, vu_count: int, lanes: int) -> int:
    """SIMD time for softmax / residual / layernorm nodes."""
    if node.kind not in VECTOR_KINDS:
        raise NpuModelError(f"{node.kind} is not a vector op")
    (elems,) = node.shape
    if elems <= 0:
        raise NpuModelError("vector op with zero elements")
    return -(-VECTOR_OP_COST[node.kind] * elems // (vu_count * lanes))


def vector_cycles(kind_cost: int, elems: int, vu_count: int, lanes: int) -> int:
    """Same formula without requiring a node object (engine fast path)."""
    return -(-kind_cost * elems // (vu_count * lanes))
