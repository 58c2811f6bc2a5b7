"""Per-channel command scheduler.

One controller owns one channel.  It keeps separate FIFO queues for
regular memory commands and PIM commands, interleaves them on the shared
command/address bus (one command per cycle), and gives PIM the
priority: whenever both heads are timing-legal and refresh-safe, the PIM
command issues.  MEM commands fill the activation-delay gaps the PIM
stream leaves (tRCD, tFAW stalls), so a saturating GEMV stream does not
starve reads.

Composite GEMVs are admitted through a refresh guard: the duration bound
derived from the PIM_HEADER dims must fit before the next refresh is
due, otherwise the GEMV waits, the refresh fires, and the GEMV is
admitted afterwards.  GEMVs whose bound exceeds a full refresh interval
are rejected outright; stream builders split them into smaller chunks.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .dram import (
    ChannelState, GemvDims, MemCommand, MemKind, PimCommand, PimKind,
    SimFault, estimate_gemv_duration,
)


class SplitRequired(ValueError):
    """GEMV duration bound exceeds a whole refresh interval."""


class AddressError(ValueError):
    pass


@dataclass
class ControllerStats:
    issued_mem: int = 0
    issued_pim: int = 0
    refreshes: int = 0
    deferred_gemvs: int = 0
    mem_wait_cycles: int = 0
    pim_wait_cycles: int = 0

    def mean_wait(self, pim: bool) -> float:
        issued = self.issued_pim if pim else self.issued_mem
        wait = self.pim_wait_cycles if pim else self.mem_wait_cycles
        return wait / issued if issued else 0.0


class ChannelController:
    def __init__(self, hw, channel_id: int = 0, dual_row_buffers: bool = True,
                 queue_depth: int = 256):
        self.hw = hw
        self.state = ChannelState(hw, channel_id, dual_row_buffers)
        self.queue_depth = queue_depth
        self.mem_queue: deque[tuple[MemCommand, int]] = deque()
        self.pim_queue: deque[tuple[PimCommand, int]] = deque()
        self.ca_busy_until = 0
        self.stats = ControllerStats()

    # ---- admission ---------------------------------------------------

    def enqueue(self, cmd, now: int = 0) -> bool:
        """Append to the class queue; False signals backpressure."""
        if isinstance(cmd, PimCommand):
            if len(self.pim_queue) >= self.queue_depth:
                return False
            self.pim_queue.append((cmd, now))
        else:
            if len(self.mem_queue) >= self.queue_depth:
                return False
            self.mem_queue.append((cmd, now))
        return True

    def address_map(self, addr: int) -> tuple[int, int, int]:
        """Within-channel (bank, row, col) for a byte address."""
        if not 0 <= addr < self.hw.channel_capacity:
            raise AddressError(f"address {addr:#x} outside channel capacity")
        page = addr // self.hw.dram_page_size
        bank = page % self.hw.banks_per_channel
        row = page // self.hw.banks_per_channel
        return bank, row, addr % self.hw.dram_page_size

    def open_row_for(self, addr: int, nbytes: int, write: bool = False,
                     now: int = 0) -> list[MemCommand] | None:
        """Expand a memory access into PRE/ACT/column commands and enqueue
        them.  Returns None (retry later) when the PIM buffer of the bank
        holds the target row, per the same-row conflict rule."""
        bank_id, row, col = self.address_map(addr)
        bank = self.state.banks[bank_id]
        if bank.dual and bank.pim_buf.row == row:
            return None
        cmds = []
        if bank.mem_buf.row != row:
            if bank.mem_buf.activated:
                cmds.append(MemCommand(MemKind.PRE, self.state.channel_id, bank_id))
            cmds.append(MemCommand(MemKind.ACT, self.state.channel_id, bank_id, row))
        kind = MemKind.WR if write else MemKind.RD
        cmds.append(MemCommand(kind, self.state.channel_id, bank_id, row, col, nbytes))
        for c in cmds:
            if not self.enqueue(c, now):
                raise SimFault("mem queue overflow while expanding an access")
        return cmds

    # ---- refresh -----------------------------------------------------

    def refresh_guard(self, cmd: PimCommand, now: int) -> bool:
        """True to admit the GEMV now, False to defer until after refresh."""
        dims = cmd.dims or self.state.pending_dims
        if dims is None:
            raise SimFault("GEMV reached the scheduler without HEADER dims")
        est = estimate_gemv_duration(dims, self.hw)
        if est > self.hw.timing.tREFI:
            raise SplitRequired(
                f"GEMV bound {est} exceeds tREFI {self.hw.timing.tREFI}; issue smaller k")
        return now + est <= self.state.next_refresh_due

    def _refresh_due(self, now: int) -> bool:
        return now >= self.state.next_refresh_due

    def _gemv_in_flight(self) -> bool:
        ctx = self.state.gemv_ctx
        return ctx is not None and ctx.done_at is None

    def _pim_round_open(self) -> bool:
        """A PIM activation round is underway or activated rows await a
        queued dot-product; refresh must not precharge them."""
        st = self.state
        if self._gemv_in_flight() or st._acts_this_round:
            return True
        return bool(self.pim_queue) and any(b.pim_buf.activated for b in st.banks)

    # ---- issue -------------------------------------------------------

    def tick(self, now: int):
        """Issue at most one command this cycle; returns it or None."""
        if now < self.ca_busy_until or now < self.state.refresh_until:
            return None

        if self._refresh_due(now) and not self._pim_round_open():
            ref = MemCommand(MemKind.REF, self.state.channel_id)
            if self.state.check_timing(ref, now) <= now:
                self.state.apply_mem_command(ref, now)
                self.stats.refreshes += 1
                self.ca_busy_until = now + 1
                return ref

        issued = self._try_pim(now)
        if issued is None:
            issued = self._try_mem(now)
        if issued is not None:
            self.ca_busy_until = now + 1
        return issued

    def _try_pim(self, now: int):
        if not self.pim_queue:
            return None
        cmd, enq = self.pim_queue[0]
        if cmd.kind is PimKind.GEMV:
            if not self.refresh_guard(cmd, now):
                self.stats.deferred_gemvs += 1
                return None
        if self.state.check_timing(cmd, now) > now:
            return None
        self.pim_queue.popleft()
        self.state.apply_pim_command(cmd, now)
        self.stats.issued_pim += 1
        self.stats.pim_wait_cycles += now - enq
        return cmd

    def _try_mem(self, now: int):
        if not self.mem_queue:
            return None
        # FR-FCFS: prefer a row-hit column command, but never hoist one
        # over an earlier command to the same bank.
        blocked_banks = set()
        pick = None
        for idx, (cmd, _) in enumerate(self.mem_queue):
            if cmd.kind is MemKind.REF:
                break
            if cmd.bank in blocked_banks:
                blocked_banks.add(cmd.bank)
                continue
            if cmd.kind in (MemKind.RD, MemKind.WR):
                if (self.state.banks[cmd.bank].mem_buf.row == cmd.row
                        and self.state.check_timing(cmd, now) <= now):
                    pick = idx
                    break
            blocked_banks.add(cmd.bank)
        if pick is None:
            cmd, _ = self.mem_queue[0]
            if self.state.check_timing(cmd, now) > now:
                return None
            pick = 0
        cmd, enq = self.mem_queue[pick]
        del self.mem_queue[pick]
        self.state.apply_mem_command(cmd, now)
        self.stats.issued_mem += 1
        self.stats.mem_wait_cycles += now - enq
        return cmd

    # ---- drivers -----------------------------------------------------

    def drain(self, start: int = 0, feeder=None, max_cycles: int = 50_000_000) -> int:
        """Tick until both queues are empty and any GEMV has completed.

        ``feeder`` is an optional iterator of commands refilled under
        backpressure.  Returns the cycle after the last completion.
        """
        now = start
        pending = None
        feeder = iter(feeder) if feeder is not None else None
        last_progress = now
        while True:
            while feeder is not None:
                if pending is None:
                    pending = next(feeder, None)
                    if pending is None:
                        feeder = None
                        break
                if self.enqueue(pending, now):
                    pending = None
                else:
                    break
            if (feeder is None and pending is None and not self.pim_queue
                    and not self.mem_queue and not self._gemv_in_flight()
                    and not self.state._acts_this_round):
                break
            if self.tick(now) is not None:
                last_progress = now
            if now - last_progress > 10 * self.hw.timing.tREFI:
                raise SimFault(f"controller made no progress since {last_progress}")
            now += 1
            if now - start > max_cycles:
                raise SimFault("drain exceeded max_cycles")
        st = self.state
        end = max(now, st.pim_busy_until, st.data_bus_free, st.refresh_until)
        if st.gemv_ctx is not None and st.gemv_ctx.done_at is not None:
            end = max(end, st.gemv_ctx.done_at)
        return end


def ceildiv(a: int, b: int) -> int:
    return -(-a // b)


def max_gemv_tiles(hw) -> int:
    """Largest k whose duration bound leaves a non-empty admission window
    every refresh period: bound + tRFC + slack must fit inside tREFI,
    otherwise a deferred GEMV could never be admitted after the refresh."""
    budget = hw.timing.tREFI - hw.timing.tRFC - 128
    per_tile = hw.effective_tile_cycles()
    k = max(1, budget // per_tile)
    while k > 1 and estimate_gemv_duration(
            GemvDims(k * hw.banks_per_channel, hw.page_elems, k), hw) > budget:
        k -= 1
    return k


def composite_gemv_stream(hw, n_slices: int, rounds_per_slice: int,
                          result_bytes: int, channel: int = 0):
    """Command stream for one fused GEMV op (all heads of one attention
    part): per vector slice a GWRITE, then precharge/activate rounds, one
    tile per all-bank round, GEMV scopes split to stay refresh-safe."""
    total = n_slices * rounds_per_slice
    k_max = max_gemv_tiles(hw)
    groups = hw.bankgroups_per_channel
    emitted = 0
    chunk_left = 0
    for s in range(n_slices):
        yield PimCommand(PimKind.GWRITE, channel, bank=0, row=s)
        for r in range(rounds_per_slice):
            if chunk_left == 0:
                chunk = min(k_max, total - emitted)
                rows = chunk * hw.banks_per_channel
                last = emitted + chunk == total
                yield PimCommand(PimKind.HEADER, channel,
                                 dims=GemvDims(rows, hw.page_elems, chunk))
                yield PimCommand(PimKind.GEMV, channel, k=chunk,
                                 result_bytes=result_bytes if last else 0)
                chunk_left = chunk
            if emitted > 0:
                yield PimCommand(PimKind.PRECHARGE, channel)
            for g in range(groups):
                yield PimCommand(PimKind.ACTIVATION, channel, group=g, row=r)
            emitted += 1
            chunk_left -= 1
    yield PimCommand(PimKind.PRECHARGE, channel)


def baseline_gemv_stream(hw, rounds: int, partial_bytes: int, channel: int = 0,
                         gwrite_rows: int = 1):
    """Legacy fine-grained stream: fixed-dimensionality GEMV driven by
    explicit per-round DOTPRODUCT commands, partial results read out every
    round (no cross-round accumulation latches)."""
    groups = hw.bankgroups_per_channel
    for s in range(gwrite_rows):
        yield PimCommand(PimKind.GWRITE, channel, bank=0, row=s)
    for r in range(rounds):
        if r > 0:
            yield PimCommand(PimKind.PRECHARGE, channel)
        for g in range(groups):
            yield PimCommand(PimKind.ACTIVATION, channel, group=g, row=r)
        yield PimCommand(PimKind.DOTPRODUCT, channel)
        yield PimCommand(PimKind.RDRESULT, channel, result_bytes=partial_bytes)
    yield PimCommand(PimKind.PRECHARGE, channel)


def mha_command_stream(hw, seq_len: int, embed_dim: int, n_head: int,
                       composite: bool = True, channel: int = 0):
    """Full attention command stream for one request on its channel.

    Composite mode fuses heads per part (score GEMV over the key cache,
    then the value reduction) with variable dims from the HEADER.  The
    baseline runs head-by-head with rigid per-head dims, staging the
    query/softmax vectors through regular memory writes.
    """
    P = hw.page_elems
    B = hw.banks_per_channel
    d_h = embed_dim // n_head
    dw = hw.data_width
    if composite:
        # scores: K^T x q over all heads
        yield from composite_gemv_stream(
            hw, n_slices=ceildiv(embed_dim, P), rounds_per_slice=ceildiv(seq_len, B),
            result_bytes=seq_len * n_head * dw, channel=channel)
        # attention-weighted values
        yield from composite_gemv_stream(
            hw, n_slices=ceildiv(seq_len, P) * n_head,
            rounds_per_slice=ceildiv(d_h, B),
            result_bytes=embed_dim * dw, channel=channel)
        return
    # Baseline: stage q via MEM writes, then per-head score GEMV,
    # per-head result readout, softmax staging, per-head value GEMV.
    q_rows = ceildiv(embed_dim * dw, hw.dram_page_size)
    for r in range(q_rows):
        yield MemCommand(MemKind.ACT, channel, bank=r % B, row=512 + r // B)
        yield MemCommand(MemKind.WR, channel, bank=r % B, row=512 + r // B,
                         nbytes=min(hw.dram_page_size, embed_dim * dw - r * hw.dram_page_size))
        yield MemCommand(MemKind.PRE, channel, bank=r % B)
    seq_per_round = B * max(1, P // d_h)
    for h in range(n_head):
        yield from baseline_gemv_stream(
            hw, rounds=ceildiv(seq_len, seq_per_round),
            partial_bytes=B * 4, channel=channel)
        # stage the per-head softmax result back into a bank row
        sm_bytes = seq_len * dw
        for r in range(ceildiv(sm_bytes, hw.dram_page_size)):
            bank = (h + r) % B
            yield MemCommand(MemKind.ACT, channel, bank=bank, row=768 + r)
            yield MemCommand(MemKind.WR, channel, bank=bank, row=768 + r,
                             nbytes=min(hw.dram_page_size, sm_bytes - r * hw.dram_page_size))
            yield MemCommand(MemKind.PRE, channel, bank=bank)
        yield from baseline_gemv_stream(
            hw, rounds=ceildiv(d_h, B) * ceildiv(seq_len, P),
            partial_bytes=B * 16 * 4, channel=channel)


def simulate_mha(hw, seq_len: int, embed_dim: int, n_head: int,
                 composite: bool = True, dual: bool = True) -> int:
    """Service cycles for one request's attention on an idle channel."""
    ctl = ChannelController(hw, dual_row_buffers=dual)
    stream = mha_command_stream(hw, seq_len, embed_dim, n_head, composite)
    return ctl.drain(feeder=stream)
