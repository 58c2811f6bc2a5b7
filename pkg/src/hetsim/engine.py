"""Stage-synchronous execution engine.

An iteration is a sequence of barriered slots.  Each slot bundles the
work concurrently in flight on the exclusive resources (systolic arrays,
vector units, per-channel GEMV engines, the inter-device link) and its
duration is the max over them, subject to a memory conveyor that streams
weights, activations, KV appends, and attention readouts at the
aggregate channel bandwidth.

Mode semantics:

* npu-only: attention runs on the NPU as bandwidth-bound GEMV traffic;
  every slot competes for the same conveyor.
* pim-blocked: attention is offloaded to per-channel GEMV units, but the
  single row buffer serializes in-memory compute against all regular
  traffic on a channel: the conveyor freezes during attention slots, and
  each request executes head-by-head with per-round result readouts
  (rigid fixed-dimension GEMV, no cross-round accumulation).
* overlap: dual row buffers let the conveyor run through attention
  slots, attention fuses heads behind one variable-dimension scope with
  results latched until the end, and (with sub-batch interleaving) the
  batch splits in two so GEMM slots of one half hide the attention slots
  of the other.

The per-layer slot chain for sub-batch interleaving follows the
two-stream pipeline: element k of the first sub-batch shares a slot with
element k-1 of the second, so the systolic arrays and the GEMV channels
are both busy in steady state and one stream's attention hides behind
the other's GEMMs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .config import HardwareConfig, ModelConfig
from .graph import OpKind
from .npu import Tile, gemm_tile_cycles
from .scheduler import (
    BatchScheduler, IterationPlan, MhaParams, Request, ceildiv,
    estimate_mha_latency, partition_subbatches,
)


class SimulationDeadlock(RuntimeError):
    pass


@dataclass(frozen=True)
class ExecutionMode:
    name: str
    pim: bool = True
    dual_row_buffers: bool = True
    greedy_packing: bool = True
    subbatch_interleaving: bool = True

    def __post_init__(self):
        if not self.pim and (self.dual_row_buffers or self.subbatch_interleaving):
            raise ValueError("npu-only mode cannot enable PIM-side features")


def npu_only() -> ExecutionMode:
    return ExecutionMode("npu-only", pim=False, dual_row_buffers=False,
                         greedy_packing=False, subbatch_interleaving=False)


def pim_blocked() -> ExecutionMode:
    """Naive NPU+PIM integration: single row buffer, round-robin placement."""
    return ExecutionMode("pim-blocked", pim=True, dual_row_buffers=False,
                         greedy_packing=False, subbatch_interleaving=False)


def overlap(dual_row_buffers: bool = True, greedy_packing: bool = True,
            subbatch_interleaving: bool = True) -> ExecutionMode:
    """Full system; flags switch off individual techniques for ablations."""
    return ExecutionMode("overlap", pim=True, dual_row_buffers=dual_row_buffers,
                         greedy_packing=greedy_packing,
                         subbatch_interleaving=subbatch_interleaving)


MODES = {"npu-only": npu_only, "pim-blocked": pim_blocked, "overlap": overlap}


@dataclass(frozen=True)
class SimParams:
    link_bytes_per_cycle: int = 256   # inter-device all-reduce bandwidth
    vec_launch_cycles: int = 32       # dependency-barrier cost of an offloaded vector op
    vector_ops_enabled: bool = True   # layernorm/residual modeling flag
    prefetch_window: int = 2          # slots the conveyor may run ahead
    measure_iterations: int = 24
    energy_read: float = 1.0
    energy_write: float = 1.1
    energy_act: float = 2.5
    energy_pim_op: float = 4.0        # all-bank compute vs a read


@dataclass
class Metrics:
    tokens_completed: int = 0
    sim_cycles: int = 0
    npu_busy: int = 0
    npuv_busy: int = 0
    pim_busy: int = 0                # channel-cycles, summed over channels
    link_busy: int = 0
    bytes_moved: int = 0
    command_counts: dict = field(default_factory=dict)
    clock_freq: float = 1e9
    n_channels: int = 32

    def add_commands(self, counts: dict) -> None:
        for k, v in counts.items():
            self.command_counts[k] = self.command_counts.get(k, 0) + v

    def merge(self, other: "Metrics") -> None:
        self.tokens_completed += other.tokens_completed
        self.sim_cycles += other.sim_cycles
        self.npu_busy += other.npu_busy
        self.npuv_busy += other.npuv_busy
        self.pim_busy += other.pim_busy
        self.link_busy += other.link_busy
        self.bytes_moved += other.bytes_moved
        self.add_commands(other.command_counts)

    @property
    def throughput_tokens_per_s(self) -> float:
        if self.sim_cycles == 0:
            return 0.0
        return self.tokens_completed * self.clock_freq / self.sim_cycles

    @property
    def npu_utilization(self) -> float:
        return self.npu_busy / self.sim_cycles if self.sim_cycles else 0.0

    @property
    def npuv_utilization(self) -> float:
        return self.npuv_busy / self.sim_cycles if self.sim_cycles else 0.0

    @property
    def pim_utilization(self) -> float:
        if not self.sim_cycles:
            return 0.0
        return self.pim_busy / (self.sim_cycles * self.n_channels)

    def bandwidth_utilization(self, bytes_per_cycle: int) -> float:
        if not self.sim_cycles:
            return 0.0
        return self.bytes_moved / (self.sim_cycles * bytes_per_cycle)

    def energy(self, p: SimParams) -> float:
        c = self.command_counts
        return (c.get("RD", 0) * p.energy_read + c.get("WR", 0) * p.energy_write
                + c.get("ACT", 0) * p.energy_act
                + c.get("PIM_OP", 0) * p.energy_pim_op)

    def to_dict(self, hw: HardwareConfig, p: SimParams) -> dict:
        return {
            "tokens_completed": self.tokens_completed,
            "sim_cycles": self.sim_cycles,
            "tokens_per_s": self.throughput_tokens_per_s,
            "npu_util": self.npu_utilization,
            "npuv_util": self.npuv_utilization,
            "pim_util": self.pim_utilization,
            "bw_util": self.bandwidth_utilization(hw.total_mem_bytes_per_cycle),
            "bytes_moved": self.bytes_moved,
            "command_counts": dict(sorted(self.command_counts.items())),
            "energy_units": self.energy(p),
        }


@dataclass
class StageTimeline:
    intervals: list = field(default_factory=list)  # (resource, start, end, label)
    iteration_marks: list = field(default_factory=list)

    def record(self, resource: str, start: int, end: int, label: str) -> None:
        if end > start:
            self.intervals.append((resource, start, end, label))

    def check_no_overlap(self) -> None:
        by_res: dict[str, list] = {}
        for res, s, e, _ in self.intervals:
            by_res.setdefault(res, []).append((s, e))
        for res, spans in by_res.items():
            spans.sort()
            for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
                if s2 < e1:
                    raise SimulationDeadlock(
                        f"overlapping busy intervals on {res}: ({s1},{e1}) vs ({s2},{e2})")

    def dump_csv(self) -> str:
        lines = ["resource,start,end,label"]
        lines += [f"{r},{s},{e},{l}" for r, s, e, l in self.intervals]
        return "\n".join(lines)


# ---------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------

GEMM_LAYER_KINDS = (OpKind.QKV_GEN, OpKind.PROJECTION, OpKind.FFN1, OpKind.FFN2)


@dataclass(frozen=True)
class BlockCost:
    compute: int
    weight_bytes: int
    act_bytes: int


@dataclass
class ChannelMhaCost:
    pim_cycles: int          # service time of the channel's GEMV engine
    vec_cycles: int          # softmax work on the vector units
    readout_bytes: int       # results streamed over the channel bus
    commands: dict


class DeviceCostModel:
    """Closed-form per-slot costs for one device under TP/PP sharding."""

    def __init__(self, hw: HardwareConfig, model: ModelConfig, params: SimParams):
        self.hw = hw
        self.model = model
        self.params = params
        tp = model.tp_degree
        self.heads_dev = model.num_heads // tp
        self.e_dev = self.heads_dev * model.head_dim
        self.layers_dev = model.num_layers // model.pp_degree
        self.d_h = model.head_dim
        self.mha_params = MhaParams(
            embed_dim=self.e_dev, n_head=self.heads_dev,
            tile_latency=hw.effective_tile_cycles(),
            gwrite_latency=hw.gwrite_latency,
            page_elems=hw.page_elems, banks_per_channel=hw.banks_per_channel)
        E, dw = model.d_model, hw.data_width
        self._shapes = {
            OpKind.QKV_GEN: (3 * E // tp, E),
            OpKind.PROJECTION: (E, E // tp),
            OpKind.FFN1: (model.ffn_hidden // tp, E),
            OpKind.FFN2: (E, model.ffn_hidden // tp),
        }
        self.kv_token_bytes = self.e_dev * dw  # per layer, per K or V
        self._block_cache: dict[tuple, BlockCost] = {}
        self._mha_cache: dict[tuple, tuple] = {}

    def weight_bytes_per_device(self) -> int:
        per_layer = sum(n * k for n, k in self._shapes.values()) * self.hw.data_width
        return per_layer * self.layers_dev

    # ---- NPU GEMM blocks --------------------------------------------

    def gemm_block(self, rows: int, kind: OpKind) -> BlockCost:
        key = (rows, kind)
        hit = self._block_cache.get(key)
        if hit is not None:
            return hit
        n, k = self._shapes[kind]
        sa = self.hw.systolic_dim
        total = 0
        for mi in range(0, rows, sa):
            mt = min(sa, rows - mi)
            for ni in range(0, n, sa):
                total += gemm_tile_cycles(Tile(mt, min(sa, n - ni), k))
        dw = self.hw.data_width
        cost = BlockCost(ceildiv(total, self.hw.systolic_arrays),
                         k * n * dw, (rows * k + rows * n) * dw)
        self._block_cache[key] = cost
        return cost

    def npu_bundle(self, rows: int, kinds) -> BlockCost:
        blocks = [self.gemm_block(rows, k) for k in kinds]
        return BlockCost(sum(b.compute for b in blocks),
                         sum(b.weight_bytes for b in blocks),
                         sum(b.act_bytes for b in blocks))

    def layer_vector_cycles(self, rows: int) -> int:
        """Residuals and layernorms of one decoder block."""
        if not self.params.vector_ops_enabled:
            return 0
        elems = rows * self.model.d_model
        lanes = self.hw.vector_units * self.hw.vector_lanes
        return ceildiv((2 * 4 + 2 * 1) * elems, lanes)

    def allreduce_cycles(self, rows: int) -> int:
        """Two all-reduces per decoder block (projection and FFN output)."""
        tp = self.model.tp_degree
        if tp == 1:
            return 0
        vol = 2 * rows * self.model.d_model * self.hw.data_width
        ring = 2 * (tp - 1) / tp
        return ceildiv(int(vol * ring), self.params.link_bytes_per_cycle)

    # ---- attention on the PIM side -----------------------------------

    def _round_cycles(self) -> int:
        """One all-bank activation round feeding one GEMV tile."""
        t = self.hw.timing
        groups = self.hw.bankgroups_per_channel
        act_stream = (groups - 1) * t.tFAW
        return max(groups * t.tFAW,
                   act_stream + t.tRCD + self.hw.pim_tile_latency + t.tRP)

    def _row_stage_cycles(self, nbytes: int) -> int:
        """Stage a vector into bank rows through regular memory writes."""
        t = self.hw.timing
        rows = ceildiv(nbytes, self.hw.dram_page_size)
        return rows * (t.tRCD + t.tRP + 4) + ceildiv(
            nbytes, self.hw.mem_bytes_per_cycle_per_channel)

    def mha_request_overlapped(self, seq_len: int) -> tuple[int, int, int, dict]:
        """(pim_cycles, vec_cycles, readout_bytes, commands) for one request
        with the fused variable-dimension GEMV protocol."""
        key = ("ov", seq_len)
        hit = self._mha_cache.get(key)
        if hit is not None:
            return hit
        hw, p = self.hw, self.mha_params
        t = hw.timing
        pim = estimate_mha_latency(seq_len, p)
        readout = (seq_len * self.heads_dev + self.e_dev) * hw.data_width
        pim += t.tRCD + hw.pim_tile_latency + ceildiv(
            readout, hw.mem_bytes_per_cycle_per_channel)
        lanes = hw.vector_units * hw.vector_lanes
        vec = ceildiv(5 * seq_len * self.heads_dev, lanes)
        tiles = (ceildiv(seq_len, p.banks_per_channel) * ceildiv(self.e_dev, p.page_elems)
                 + ceildiv(self.d_h, p.banks_per_channel)
                 * ceildiv(seq_len, p.page_elems) * self.heads_dev)
        gwrites = (ceildiv(self.e_dev, p.page_elems)
                   + ceildiv(seq_len, p.page_elems) * self.heads_dev)
        groups = hw.bankgroups_per_channel
        cmds = {"PIM_OP": tiles + gwrites, "ACT": tiles * groups,
                "PIM_GEMV": 2, "PIM_HEADER": 2, "PRE": tiles}
        out = (pim, vec, readout, cmds)
        self._mha_cache[key] = out
        return out

    def mha_request_blocked(self, seq_len: int) -> tuple[int, int, dict]:
        """(cycles, transfer_bytes, commands) for one request under the
        legacy protocol: rigid per-head GEMVs, partial results read out
        every activation round, vectors staged through memory writes
        between in-memory kernels."""
        key = ("bl", seq_len)
        hit = self._mha_cache.get(key)
        if hit is not None:
            return hit
        hw = self.hw
        t = hw.timing
        bpc = hw.mem_bytes_per_cycle_per_channel
        banks = hw.banks_per_channel
        groups = hw.bankgroups_per_channel
        dw = hw.data_width
        base_round = (groups - 1) * t.tFAW + t.tRCD + hw.pim_tile_latency + t.tRP + 1
        lanes = hw.vector_units * hw.vector_lanes

        score_partial = banks * 4                  # one fp32 partial per bank
        value_partial = banks * 16 * 4             # per-lane partials
        seq_per_round = banks * max(1, hw.page_elems // self.d_h)
        r1 = ceildiv(seq_len, seq_per_round)
        r2 = ceildiv(self.d_h, banks) * ceildiv(seq_len, hw.page_elems)

        cycles = self._row_stage_cycles(self.e_dev * dw)   # stage the query vector
        xfer = self.e_dev * dw
        for _ in range(self.heads_dev):
            cycles += hw.gwrite_latency
            cycles += r1 * (base_round + ceildiv(score_partial, bpc))
            cycles += self.params.vec_launch_cycles
            cycles += ceildiv(5 * seq_len, lanes)
            sm_bytes = seq_len * dw
            cycles += self._row_stage_cycles(sm_bytes)
            cycles += ceildiv(seq_len, hw.page_elems) * hw.gwrite_latency
            cycles += r2 * (base_round + ceildiv(value_partial, bpc))
            xfer += r1 * score_partial + r2 * value_partial + sm_bytes
        gwrites = self.heads_dev * (1 + ceildiv(seq_len, hw.page_elems))
        rounds = self.heads_dev * (r1 + r2)
        cmds = {"PIM_OP": rounds + gwrites, "ACT": rounds * groups,
                "PIM_DOTPRODUCT": rounds, "PIM_RDRESULT": rounds,
                "PRE": rounds,
                "WR": ceildiv(xfer, 64)}
        out = (cycles, xfer, cmds)
        self._mha_cache[key] = out
        return out

    def mha_channel(self, requests: list[Request], dual: bool) -> ChannelMhaCost:
        """Service cost of one channel's resident requests for one layer."""
        cmds: dict[str, int] = {}
        if dual:
            pim = vec = readout = 0
            first_fill = last_drain = 0
            for i, r in enumerate(requests):
                p, v, ro, c = self.mha_request_overlapped(r.context_len)
                pim += p
                vec += v
                readout += ro
                for k, n in c.items():
                    cmds[k] = cmds.get(k, 0) + n
                if i == 0:
                    first_fill = p // 2
                if i == len(requests) - 1:
                    last_drain = p // 2
            service = max(pim, vec + first_fill + last_drain)
            return ChannelMhaCost(service, vec, readout, cmds)
        total = xfer = vec = 0
        for r in requests:
            cyc, x, c = self.mha_request_blocked(r.context_len)
            total += cyc
            xfer += x
            for k, n in c.items():
                cmds[k] = cmds.get(k, 0) + n
            vec += ceildiv(5 * r.context_len * self.heads_dev,
                           self.hw.vector_units * self.hw.vector_lanes)
        return ChannelMhaCost(total, vec, xfer, cmds)

    def mha_npu_bytes(self, requests: list[Request]) -> int:
        """KV traffic of attention executed on the NPU itself."""
        dw = self.hw.data_width
        return sum(2 * r.context_len * self.e_dev * dw + 2 * r.context_len
                   * self.heads_dev * dw for r in requests)

    def kv_append_bytes(self, n_requests: int) -> int:
        return n_requests * 2 * self.kv_token_bytes


# ---------------------------------------------------------------------
# slot construction and the memory conveyor
# ---------------------------------------------------------------------


@dataclass
class Slot:
    label: str
    npu: int = 0          # systolic-array cycles
    vec: int = 0          # vector-unit cycles
    pim: int = 0          # max busy over channels
    pim_sum: int = 0      # channel-cycles over all channels (utilization)
    comm: int = 0         # link cycles overlapped with this slot's work
    comm_serial: int = 0  # link cycles with nothing to hide behind
    mem_bytes: int = 0    # conveyor demand that must land inside/near the slot
    extra_bytes: int = 0  # traffic serialized inside channel epochs
    pim_epoch: bool = False   # blocked mode: conveyor frozen during this slot
    commands: dict = field(default_factory=dict)

    @property
    def local_duration(self) -> int:
        return max(self.npu, self.vec, self.pim, self.comm) + self.comm_serial

    def add_commands(self, counts: dict) -> None:
        for k, v in counts.items():
            self.commands[k] = self.commands.get(k, 0) + v


def _mha_slot(cost: DeviceCostModel, per_channel: list[list[Request]],
              members: set[int] | None, mode: ExecutionMode, label: str) -> Slot:
    slot = Slot(label, pim_epoch=not mode.dual_row_buffers)
    readout = 0
    n_req = 0
    for chnl in per_channel:
        reqs = [r for r in chnl if members is None or r.id in members]
        if not reqs:
            continue
        n_req += len(reqs)
        c = cost.mha_channel(reqs, mode.dual_row_buffers)
        slot.pim = max(slot.pim, c.pim_cycles)
        slot.pim_sum += c.pim_cycles
        if mode.dual_row_buffers:
            slot.vec = max(slot.vec, c.vec_cycles)
        readout += c.readout_bytes
        slot.add_commands(c.commands)
    kv = cost.kv_append_bytes(n_req)
    slot.add_commands({"WR": ceildiv(kv, 64)})
    if mode.dual_row_buffers:
        slot.mem_bytes = readout + kv
    else:
        # transfers already serialized inside the channel epochs
        slot.extra_bytes = readout + kv
    return slot


def _npu_slot(cost: DeviceCostModel, rows: int, kinds, label: str,
              with_weights: bool, comm_serial: int = 0) -> Slot:
    bundle = cost.npu_bundle(rows, kinds)
    mem = bundle.act_bytes + (bundle.weight_bytes if with_weights else 0)
    return Slot(label, npu=bundle.compute, vec=cost.layer_vector_cycles(rows),
                comm_serial=comm_serial, mem_bytes=mem,
                commands={"RD": ceildiv(mem, 64)})


def build_slots(plan: IterationPlan, mode: ExecutionMode,
                cost: DeviceCostModel) -> list[Slot]:
    """The barriered slot chain of one iteration on one device."""
    requests = plan.active
    if not requests:
        return []
    B = len(requests)
    layers = cost.layers_dev
    comm = cost.allreduce_cycles(B)

    if not mode.pim:
        slots = []
        for l in range(layers):
            slots.append(_npu_slot(cost, B, (OpKind.QKV_GEN,), f"L{l}.qkv", True))
            mha_bytes = cost.mha_npu_bytes(requests) + cost.kv_append_bytes(B)
            lanes = cost.hw.vector_units * cost.hw.vector_lanes
            vec = sum(ceildiv(5 * r.context_len * cost.heads_dev, lanes)
                      for r in requests)
            slots.append(Slot(f"L{l}.mha", vec=vec, mem_bytes=mha_bytes,
                              commands={"RD": ceildiv(mha_bytes, 64)}))
            slots.append(_npu_slot(
                cost, B, (OpKind.PROJECTION, OpKind.FFN1, OpKind.FFN2),
                f"L{l}.ffn", True, comm_serial=comm))
        return slots

    if not mode.subbatch_interleaving:
        slots = []
        for l in range(layers):
            slots.append(_npu_slot(cost, B, (OpKind.QKV_GEN,), f"L{l}.qkv", True))
            slots.append(_mha_slot(cost, plan.per_channel, None, mode, f"L{l}.mha"))
            slots.append(_npu_slot(
                cost, B, (OpKind.PROJECTION, OpKind.FFN1, OpKind.FFN2),
                f"L{l}.ffn", True, comm_serial=comm))
        return slots

    # Sub-batch interleaving: element k of SB1 runs alongside element k-1
    # of SB2.  NPU elements per stream: S_0 = qkv, S_l = proj+ffn+qkv,
    # S_N = proj+ffn; attention elements M_l in between.  Weights stream
    # once per layer, on the first stream's pass; a stream's all-reduce
    # overlaps the next slot, where only the other stream computes.
    sb = [plan.sb1, plan.sb2]
    members = [{r.id for r in plan.sb1}, {r.id for r in plan.sb2}]
    rows = [max(1, len(plan.sb1)), max(1, len(plan.sb2))]
    sb_comm = [cost.allreduce_cycles(rows[0]), cost.allreduce_cycles(rows[1])]

    def element(which: int, k: int) -> tuple[Slot | None, int]:
        """(slot work, trailing comm) for element k of one stream."""
        if k < 0 or k > 2 * layers or not sb[which]:
            return None, 0
        if k % 2 == 1:
            return _mha_slot(cost, plan.per_channel, members[which], mode,
                             f"S{which}.mha{(k + 1) // 2}"), 0
        idx = k // 2
        first_pass = which == 0
        if idx == 0:
            return _npu_slot(cost, rows[which], (OpKind.QKV_GEN,),
                             f"S{which}.qkv0", first_pass), 0
        kinds = ((OpKind.PROJECTION, OpKind.FFN1, OpKind.FFN2) if idx == layers
                 else (OpKind.PROJECTION, OpKind.FFN1, OpKind.FFN2, OpKind.QKV_GEN))
        return (_npu_slot(cost, rows[which], kinds, f"S{which}.npu{idx}", first_pass),
                sb_comm[which])

    slots = []
    carry_comm = 0
    for k in range(2 * layers + 2):
        merged = Slot(f"slot{k}", comm=carry_comm)
        carry_comm = 0
        for which, kk in ((0, k), (1, k - 1)):
            part, trailing = element(which, kk)
            carry_comm += trailing
            if part is None:
                continue
            merged.npu += part.npu
            merged.vec += part.vec
            merged.pim += part.pim
            merged.pim_sum += part.pim_sum
            merged.mem_bytes += part.mem_bytes
            merged.extra_bytes += part.extra_bytes
            merged.pim_epoch |= part.pim_epoch
            merged.add_commands(part.commands)
        slots.append(merged)
    if carry_comm:
        slots.append(Slot("comm-tail", comm_serial=carry_comm))
    return slots


def run_iteration(plan: IterationPlan, mode: ExecutionMode,
                  cost: DeviceCostModel,
                  timeline: StageTimeline | None = None,
                  t0: int = 0) -> tuple[Metrics, int]:
    """Execute one iteration's slot chain; returns (metrics delta, cycles)."""
    slots = build_slots(plan, mode, cost)
    params = cost.params
    bw = cost.hw.total_mem_bytes_per_cycle
    window = 0 if not mode.dual_row_buffers and mode.pim else params.prefetch_window

    m = Metrics(clock_freq=cost.hw.clock_freq, n_channels=cost.hw.hbm_channels)
    starts: list[int] = []
    t = t0
    mem_cursor = t0
    stall_streak = 0
    for i, slot in enumerate(slots):
        starts.append(t)
        demand = ceildiv(slot.mem_bytes, bw)
        earliest = starts[max(0, i - window)] if window else t
        if slot.pim_epoch:
            # single row buffer: regular traffic waits out the in-memory epoch
            delivery_end = mem_cursor
            end = t + slot.local_duration
            mem_cursor = max(mem_cursor, end)
        else:
            delivery_start = max(mem_cursor, earliest)
            delivery_end = delivery_start + demand
            mem_cursor = delivery_end
            end = max(t + slot.local_duration, delivery_end)
        if timeline is not None:
            timeline.record("npu-s", t, t + slot.npu, slot.label)
            timeline.record("npu-v", t, t + slot.vec, slot.label)
            timeline.record("pim", t, t + slot.pim, slot.label)
            timeline.record("link", t, t + slot.comm + slot.comm_serial, slot.label)
            if demand:
                timeline.record("mem", delivery_end - demand, delivery_end, slot.label)
        m.npu_busy += slot.npu
        m.npuv_busy += slot.vec
        m.pim_busy += slot.pim_sum
        m.link_busy += slot.comm + slot.comm_serial
        m.bytes_moved += slot.mem_bytes + slot.extra_bytes
        m.add_commands(slot.commands)
        has_work = slot.npu or slot.pim or slot.vec or slot.mem_bytes
        stall_streak = stall_streak + 1 if (end <= t and has_work) else 0
        if stall_streak > len(slots):
            raise SimulationDeadlock(
                f"no progress at slot {slot.label}; timeline: "
                + (timeline.dump_csv() if timeline else "n/a"))
        t = end
    m.sim_cycles = t - t0
    m.tokens_completed = len(plan.active)
    return m, t - t0


def mha_head_pipeline(pim_per_head: list[int], vec_per_head: list[int]) -> int:
    """Makespan of the per-head score -> softmax -> attend pipeline with
    the GEMV engine and the vector units as the two resources.

    Per head, the score GEMV and the value GEMV each take half the head's
    PIM cycles; softmaxes depend on scores and value GEMVs on softmaxes.
    The GEMV engine works FIFO by task readiness, which here means all
    score GEMVs first (they are ready immediately), then value GEMVs in
    softmax-completion order.
    """
    n = len(pim_per_head)
    if n == 0:
        return 0
    scores = [c - c // 2 for c in pim_per_head]
    values = [c // 2 for c in pim_per_head]
    pim_t = 0
    vec_t = 0
    softmax_done = []
    for h in range(n):
        pim_t += scores[h]
        vec_t = max(vec_t, pim_t) + vec_per_head[h]
        softmax_done.append(vec_t)
    for h in range(n):
        pim_t = max(pim_t, softmax_done[h]) + values[h]
    return pim_t


# ---------------------------------------------------------------------
# full simulation driver
# ---------------------------------------------------------------------


@dataclass
class RunResult:
    metrics: Metrics
    timeline: StageTimeline | None
    plans: list[dict]

    def to_json(self, hw: HardwareConfig, params: SimParams, meta: dict) -> str:
        payload = dict(meta)
        payload.update(self.metrics.to_dict(hw, params))
        return json.dumps(payload, indent=2)


class Simulation:
    """Warm-up plus measured iterations for one device group."""

    def __init__(self, hw: HardwareConfig, model: ModelConfig, workload,
                 mode: ExecutionMode, params: SimParams | None = None,
                 seed: int | None = None):
        from .workload import RequestSource

        self.hw = hw
        self.model = model
        self.workload = workload
        self.mode = mode
        self.params = params or SimParams()
        self.seed = workload.rng_seed if seed is None else seed
        self.cost = DeviceCostModel(hw, model, self.params)
        self.source = RequestSource(workload, self.seed)
        self.micro_batches = model.pp_degree
        self.sched = self._make_scheduler()

    def _make_scheduler(self) -> BatchScheduler:
        hw = self.hw
        budget = (hw.channel_capacity * hw.hbm_channels
                  - self.cost.weight_bytes_per_device())
        pages = max(1, budget // hw.hbm_channels // hw.dram_page_size)
        return BatchScheduler(
            n_channels=hw.hbm_channels, pages_per_channel=pages,
            batch_size=self.workload.batch_size,
            mha_params=self.cost.mha_params,
            kv_token_bytes=self.cost.kv_token_bytes,
            page_bytes=hw.dram_page_size, layers=self.cost.layers_dev,
            greedy_packing=self.mode.greedy_packing)

    def warmup(self) -> None:
        from .workload import warmup_batch

        warmup_batch(self.workload, self.sched, self.source)

    def _iteration_time(self, plan: IterationPlan, timeline, t0: int) -> tuple[Metrics, int]:
        pp = self.model.pp_degree
        if pp == 1:
            return run_iteration(plan, self.mode, self.cost, timeline, t0)
        # pipeline parallelism: micro-batches flow through pp stages of
        # layers_dev each; (pp - 1) bubble chunks per iteration
        micro = self.micro_batches
        groups = [plan.active[i::micro] for i in range(micro)]
        chunk_max = 0
        agg = Metrics(clock_freq=self.hw.clock_freq, n_channels=self.hw.hbm_channels)
        for g in groups:
            if not g:
                continue
            sub = self._subplan(plan, g)
            delta, cycles = run_iteration(sub, self.mode, self.cost, None, 0)
            chunk_max = max(chunk_max, cycles)
            agg.merge(delta)
        total = (micro + pp - 1) * chunk_max
        agg.sim_cycles = total
        agg.tokens_completed = len(plan.active)
        # stage busy counters scale by the pipeline's duty cycle
        return agg, total

    def _subplan(self, plan: IterationPlan, reqs: list[Request]) -> IterationPlan:
        ids = {r.id for r in reqs}
        per_channel = [[r for r in chnl if r.id in ids] for chnl in plan.per_channel]
        sb1, sb2 = partition_subbatches(per_channel)
        return IterationPlan(plan.index, reqs, per_channel, sb1, sb2, [], [], [])

    def run(self, iterations: int | None = None, want_timeline: bool = False,
            dump_plans: bool = False) -> RunResult:
        self.warmup()
        iterations = iterations or self.params.measure_iterations
        timeline = StageTimeline() if want_timeline else None
        total = Metrics(clock_freq=self.hw.clock_freq, n_channels=self.hw.hbm_channels)
        plans = []
        t = 0
        for _ in range(iterations):
            if len(self.sched.pool) < self.workload.batch_size:
                self.sched.submit(self.source.take(self.workload.batch_size))
            plan = self.sched.iteration_boundary()
            if not plan.active:
                raise SimulationDeadlock("no active requests at iteration boundary")
            if dump_plans:
                plans.append(plan.to_json_dict())
            delta, cycles = self._iteration_time(plan, timeline, t)
            t += cycles
            if timeline is not None:
                timeline.iteration_marks.append(t)
            total.merge(delta)
            self.sched.advance_generation()
        total.sim_cycles = t
        if timeline is not None:
            timeline.check_no_overlap()
        return RunResult(total, timeline, plans)


def model_parallel_run(hw: HardwareConfig, model: ModelConfig, workload,
                       mode: ExecutionMode, params: SimParams | None = None,
                       seed: int | None = None, iterations: int | None = None) -> Metrics:
    """Throughput of the tp x pp device group serving one global batch."""
    if model.pp_degree > model.num_layers:
        raise ValueError("pp_degree exceeds layer count")
    sim = Simulation(hw, model, workload, mode, params, seed)
    return sim.run(iterations).metrics
