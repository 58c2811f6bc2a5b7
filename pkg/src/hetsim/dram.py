"""Per-bank DRAM state machines with dual row buffers and the PIM
command set.

Each bank carries two row buffers: the MEM buffer serves regular
read/write accesses, the PIM buffer feeds the per-bank GEMV units.  The
two have independent activation state; the only coupling is the rule
that the same row may not be activated in both buffers of one bank at
once.  Emulating a legacy single-buffer ("blocked") bank is exact: alias
both names to one buffer object.

Timing enforcement covers tRP, tRCD, tRAS, tRRD_L, tWR, tCCD_S, tCCD_L,
tFAW, tREFI and tRFC.  ``check_timing`` never rejects a command; it
returns the earliest cycle at which the command would be legal, and
``apply_*`` assert they are only invoked at legal cycles.

Composite GEMV execution: a PIM_GEMV(k) command opens a k-tile scope.
Tiles are paced by the grouped PIM_ACTIVATION stream the controller
issues afterwards; each completed all-bank activation round releases one
tile (one activated row per bank, ``pim_tile_latency`` cycles), with
partial sums held in per-bank latches across rounds.  Results stream to
the host over the channel data bus when the last tile finishes.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum


class SimFault(RuntimeError):
    """A protocol violation that indicates a simulator/controller bug."""


NEVER = -(10 ** 12)  # sentinel "long ago" timestamp


class MemKind(Enum):
    ACT = "ACT"
    RD = "RD"
    WR = "WR"
    PRE = "PRE"
    REF = "REF"


class PimKind(Enum):
    HEADER = "PIM_HEADER"
    GWRITE = "PIM_GWRITE"
    ACTIVATION = "PIM_ACTIVATION"
    GEMV = "PIM_GEMV"
    DOTPRODUCT = "PIM_DOTPRODUCT"   # baseline fine-grained command set
    RDRESULT = "PIM_RDRESULT"       # baseline result readout
    PRECHARGE = "PIM_PRECHARGE"


@dataclass(frozen=True)
class MemCommand:
    kind: MemKind
    channel: int
    bank: int = 0
    row: int = 0
    col: int = 0
    nbytes: int = 0


@dataclass(frozen=True)
class GemvDims:
    """Dimensionality payload of PIM_HEADER: rows of the matrix operand
    and the shared vector length."""

    matrix_rows: int
    vec_len: int
    k_tiles: int


@dataclass(frozen=True)
class PimCommand:
    kind: PimKind
    channel: int
    bank: int = 0        # GWRITE source bank
    group: int = 0       # ACTIVATION bankgroup index
    row: int = 0
    k: int = 0           # GEMV tile count
    dims: GemvDims | None = None
    result_bytes: int = 0

    def __post_init__(self):
        if self.kind is PimKind.GEMV and self.k < 1:
            raise SimFault("PIM_GEMV requires k >= 1")


@dataclass
class RowBuffer:
    row: int | None = None
    act_at: int = NEVER
    pre_at: int = NEVER   # cycle the closing PRE was issued
    last_wr: int = NEVER

    @property
    def activated(self) -> bool:
        return self.row is not None


class BankState:
    """Dual-row-buffer bank; ``dual=False`` aliases both buffers."""

    def __init__(self, bank_id: int, bankgroup_id: int, dual: bool = True):
        self.bank_id = bank_id
        self.bankgroup_id = bankgroup_id
        self.mem_buf = RowBuffer()
        self.pim_buf = RowBuffer() if dual else self.mem_buf

    @property
    def dual(self) -> bool:
        return self.mem_buf is not self.pim_buf

    def buffer(self, pim: bool) -> RowBuffer:
        return self.pim_buf if pim else self.mem_buf

    def other(self, pim: bool) -> RowBuffer:
        return self.mem_buf if pim else self.pim_buf

    def row_conflict(self, row: int, pim: bool) -> bool:
        """Would activating ``row`` in one buffer collide with the other?"""
        if not self.dual:
            return False
        return self.other(pim).row == row


@dataclass
class GemvContext:
    dims: GemvDims
    tiles_remaining: int
    result_bytes: int
    issued_at: int
    last_tile_end: int
    done_at: int | None = None


@dataclass
class TraceEvent:
    cycle: int
    channel: int
    kind: str
    bank: int = -1     # bank, or bankgroup for grouped activation
    row: int = -1
    nbytes: int = 0

    def line(self) -> str:
        return f"{self.cycle} ch{self.channel} {self.kind} b{self.bank} r{self.row} {self.nbytes}"


class ChannelState:
    """All banks of one channel plus the shared PIM machinery."""

    def __init__(self, hw, channel_id: int = 0, dual_row_buffers: bool = True):
        self.hw = hw
        self.channel_id = channel_id
        self.dual = dual_row_buffers
        self.banks = [
            BankState(b, b // hw.banks_per_bankgroup, dual_row_buffers)
            for b in range(hw.banks_per_channel)
        ]
        self.act_window: deque[int] = deque(maxlen=4)  # tFAW ring
        self.group_last_act = [NEVER] * hw.bankgroups_per_channel
        self.last_col_at = NEVER
        self.last_col_group = -1
        self.data_bus_free = 0
        self.pim_busy_until = 0
        self.refresh_until = 0
        self.next_refresh_due = hw.timing.tREFI
        self.global_buffer_rows = 0
        self.pending_dims: GemvDims | None = None
        self.gemv_ctx: GemvContext | None = None
        self._acts_this_round = 0
        self._round_last_act = 0
        self.trace: list[TraceEvent] = []

    # ---- timing ----------------------------------------------------

    def _fawok(self, n_acts: int) -> int:
        """Earliest cycle n new activations fit in the tFAW window."""
        need_out = len(self.act_window) - (4 - n_acts)
        if need_out <= 0:
            return 0
        return self.act_window[need_out - 1] + self.hw.timing.tFAW

    def _act_earliest(self, bank: BankState, pim: bool, n_acts: int) -> int:
        t = self.hw.timing
        buf = bank.buffer(pim)
        earliest = max(self.refresh_until, self._fawok(n_acts))
        if buf.pre_at != NEVER:
            earliest = max(earliest, buf.pre_at + t.tRP)
        earliest = max(earliest, self.group_last_act[bank.bankgroup_id] + t.tRRD_L)
        if not self.dual:
            # single row buffer means a single datapath: the row restore
            # cannot overlap an in-flight result/data transfer
            earliest = max(earliest, self.data_bus_free)
        return earliest

    def check_timing(self, cmd, now: int) -> int:
        """Earliest legal issue cycle (>= now) for a MEM or PIM command."""
        t = self.hw.timing
        earliest = max(now, self.refresh_until)

        if isinstance(cmd, MemCommand):
            bank = self.banks[cmd.bank]
            buf = bank.mem_buf
            if cmd.kind is MemKind.ACT:
                earliest = max(earliest, self._act_earliest(bank, pim=False, n_acts=1))
            elif cmd.kind in (MemKind.RD, MemKind.WR):
                earliest = max(earliest, buf.act_at + t.tRCD)
                ccd = t.tCCD_L if bank.bankgroup_id == self.last_col_group else t.tCCD_S
                earliest = max(earliest, self.last_col_at + ccd)
            elif cmd.kind is MemKind.PRE:
                if buf.activated:
                    earliest = max(earliest, buf.act_at + t.tRAS)
                    if buf.last_wr != NEVER:
                        earliest = max(earliest, buf.last_wr + t.tWR)
            elif cmd.kind is MemKind.REF:
                # refresh force-precharges every buffer, so it inherits the
                # precharge constraints of all open rows
                for b in self.banks:
                    for rb in (b.mem_buf, b.pim_buf):
                        if rb.activated:
                            earliest = max(earliest, rb.act_at + t.tRAS)
                            if rb.last_wr != NEVER:
                                earliest = max(earliest, rb.last_wr + t.tWR)
            return earliest

        if cmd.kind is PimKind.ACTIVATION:
            first = cmd.group * self.hw.banks_per_bankgroup
            group = self.banks[first:first + self.hw.banks_per_bankgroup]
            for bank in group:
                earliest = max(earliest, self._act_earliest(
                    bank, pim=True, n_acts=self.hw.banks_per_bankgroup))
        elif cmd.kind in (PimKind.GWRITE, PimKind.GEMV, PimKind.DOTPRODUCT):
            earliest = max(earliest, self.pim_busy_until)
            if cmd.kind is PimKind.DOTPRODUCT:
                for bank in self.banks:
                    if bank.pim_buf.activated:
                        earliest = max(earliest, bank.pim_buf.act_at + t.tRCD)
        elif cmd.kind is PimKind.PRECHARGE:
            earliest = max(earliest, self.pim_busy_until)  # rows in use by a tile
            for bank in self.banks:
                buf = bank.pim_buf
                if buf.activated:
                    earliest = max(earliest, buf.act_at + t.tRAS)
                    if buf.last_wr != NEVER:
                        earliest = max(earliest, buf.last_wr + t.tWR)
            if not self.dual:
                earliest = max(earliest, self.data_bus_free)
        return earliest

    # ---- helpers ---------------------------------------------------

    def _record(self, now, kind, bank=-1, row=-1, nbytes=0):
        self.trace.append(TraceEvent(now, self.channel_id, kind, bank, row, nbytes))

    def _push_acts(self, now: int, n: int) -> None:
        for _ in range(n):
            self.act_window.append(now)

    def _bus_transfer(self, start: int, nbytes: int) -> int:
        begin = max(start, self.data_bus_free)
        dur = -(-nbytes // self.hw.mem_bytes_per_cycle_per_channel)
        self.data_bus_free = begin + dur
        return self.data_bus_free

    # ---- MEM command execution -------------------------------------

    def apply_mem_command(self, cmd: MemCommand, now: int) -> int:
        """Mutate MEM-buffer state; returns the completion cycle.

        Never touches the PIM buffer (unless the bank is single-buffered).
        """
        if now < self.check_timing(cmd, now):
            raise SimFault(f"{cmd.kind} at {now} violates timing")
        bank = self.banks[cmd.bank]
        buf = bank.mem_buf
        t = self.hw.timing

        if cmd.kind is MemKind.ACT:
            if buf.activated:
                raise SimFault(f"ACT on bank {cmd.bank} with row {buf.row} open")
            if bank.row_conflict(cmd.row, pim=False):
                raise SimFault(f"row {cmd.row} activated in both buffers of bank {cmd.bank}")
            buf.row = cmd.row
            buf.act_at = now
            buf.last_wr = NEVER
            self.group_last_act[bank.bankgroup_id] = now
            self._push_acts(now, 1)
            self._record(now, "ACT", cmd.bank, cmd.row)
            return now + t.tRCD

        if cmd.kind in (MemKind.RD, MemKind.WR):
            if buf.row != cmd.row:
                raise SimFault(
                    f"{cmd.kind.value} row {cmd.row} but mem buffer holds {buf.row}")
            if cmd.kind is MemKind.WR:
                buf.last_wr = now
            self.last_col_at = now
            self.last_col_group = bank.bankgroup_id
            done = self._bus_transfer(now, cmd.nbytes)
            self._record(now, cmd.kind.value, cmd.bank, cmd.row, cmd.nbytes)
            return done

        if cmd.kind is MemKind.PRE:
            buf.row = None
            buf.pre_at = now
            self._record(now, "PRE", cmd.bank)
            return now + t.tRP

        if cmd.kind is MemKind.REF:
            if self.gemv_ctx is not None and self.gemv_ctx.done_at is None:
                raise SimFault("refresh issued while a GEMV is in flight")
            for b in self.banks:
                for rb in {id(b.mem_buf): b.mem_buf, id(b.pim_buf): b.pim_buf}.values():
                    rb.row = None
                    rb.pre_at = now
            self.refresh_until = now + t.tRFC
            self.next_refresh_due += t.tREFI
            self._record(now, "REF")
            return self.refresh_until

        raise SimFault(f"unhandled mem command {cmd.kind}")

    # ---- PIM command execution -------------------------------------

    def apply_pim_command(self, cmd: PimCommand, now: int) -> int:
        """Mutate PIM-side state; returns the modeled completion cycle.

        For GEMV the return value is the engine-busy projection
        (k * tile latency + result readout); wall-clock completion lands
        when the activation stream has delivered all k rounds and is
        recorded in ``gemv_ctx.done_at``.
        """
        if now < self.check_timing(cmd, now):
            raise SimFault(f"{cmd.kind} at {now} violates timing")
        hw = self.hw
        t = hw.timing

        if cmd.kind is PimKind.HEADER:
            self.pending_dims = cmd.dims
            self._record(now, "PIM_HEADER")
            return now + 1

        if cmd.kind is PimKind.GWRITE:
            self.global_buffer_rows += 1
            self.pim_busy_until = now + hw.gwrite_latency
            self._record(now, "PIM_GWRITE", cmd.bank, cmd.row)
            return self.pim_busy_until

        if cmd.kind is PimKind.ACTIVATION:
            first = cmd.group * hw.banks_per_bankgroup
            for bank in self.banks[first:first + hw.banks_per_bankgroup]:
                buf = bank.pim_buf
                if buf.activated:
                    raise SimFault(f"PIM ACT on bank {bank.bank_id} with row open")
                if bank.row_conflict(cmd.row, pim=True):
                    raise SimFault(f"row {cmd.row} open in MEM buffer of bank {bank.bank_id}")
                buf.row = cmd.row
                buf.act_at = now
            self.group_last_act[cmd.group] = now
            self._push_acts(now, hw.banks_per_bankgroup)
            self._record(now, "PIM_ACTIVATION", cmd.group, cmd.row)
            self._acts_this_round += 1
            self._round_last_act = now
            if self._acts_this_round == hw.bankgroups_per_channel:
                self._acts_this_round = 0
                self._round_done(now + t.tRCD)
            return now + t.tRCD

        if cmd.kind is PimKind.GEMV:
            if self.pending_dims is None:
                raise SimFault("PIM_GEMV without a preceding PIM_HEADER")
            if self.global_buffer_rows == 0:
                raise SimFault("PIM_GEMV with empty global vector buffer")
            self.gemv_ctx = GemvContext(
                dims=self.pending_dims, tiles_remaining=cmd.k,
                result_bytes=cmd.result_bytes, issued_at=now, last_tile_end=now)
            self._record(now, "PIM_GEMV", nbytes=cmd.k)
            readout = -(-cmd.result_bytes // hw.mem_bytes_per_cycle_per_channel)
            return now + cmd.k * hw.pim_tile_latency + readout

        if cmd.kind is PimKind.DOTPRODUCT:
            self.pim_busy_until = max(self.pim_busy_until, now) + hw.pim_tile_latency
            self._record(now, "PIM_DOTPRODUCT")
            return self.pim_busy_until

        if cmd.kind is PimKind.RDRESULT:
            done = self._bus_transfer(max(now, self.pim_busy_until), cmd.result_bytes)
            self._record(now, "PIM_RDRESULT", nbytes=cmd.result_bytes)
            return done

        if cmd.kind is PimKind.PRECHARGE:
            for bank in self.banks:
                # idempotent on already-precharged buffers
                if bank.pim_buf.activated:
                    bank.pim_buf.row = None
                    bank.pim_buf.pre_at = now
            self._record(now, "PIM_PRECHARGE")
            return now + t.tRP

        raise SimFault(f"unhandled pim command {cmd.kind}")

    def _round_done(self, ready: int) -> None:
        """A full all-bank activation round is ready; run one GEMV tile."""
        ctx = self.gemv_ctx
        if ctx is None or ctx.tiles_remaining == 0:
            return
        start = max(ready, ctx.last_tile_end, self.pim_busy_until)
        ctx.last_tile_end = start + self.hw.pim_tile_latency
        self.pim_busy_until = ctx.last_tile_end
        ctx.tiles_remaining -= 1
        if ctx.tiles_remaining == 0:
            ctx.done_at = self._bus_transfer(ctx.last_tile_end, ctx.result_bytes)
            self.pim_busy_until = ctx.done_at


def estimate_gemv_duration(dims: GemvDims, hw) -> int:
    """Deterministic upper bound on composite GEMV service time, used for
    refresh-safe scheduling.  Must dominate the simulated duration for the
    same dims."""
    per_tile = hw.effective_tile_cycles()
    readout = -(-dims.matrix_rows * hw.data_width // hw.mem_bytes_per_cycle_per_channel)
    slack = hw.timing.tRCD + hw.pim_tile_latency + hw.timing.tRP + 64
    return dims.k_tiles * per_tile + readout + slack
