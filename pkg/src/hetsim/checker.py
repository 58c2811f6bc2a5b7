"""Independent replay checker for accepted command traces.

Re-derives every timing constraint from the raw trace alone, without
consulting the bank state machines, so that a scheduler bug in one
cannot hide in the other.  A trace is the list of
:class:`~hetsim.dram.TraceEvent` a channel accepted, in issue order.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class Violation:
    cycle: int
    rule: str
    detail: str

    def __str__(self) -> str:
        return f"@{self.cycle} {self.rule}: {self.detail}"


@dataclass
class _BufTrack:
    row: int | None = None
    act_at: int = -(10 ** 12)
    pre_at: int = -(10 ** 12)
    wr_at: int = -(10 ** 12)


class TraceChecker:
    """Replays one channel's trace and collects timing violations."""

    def __init__(self, hw):
        self.hw = hw
        self.t = hw.timing
        nb = hw.banks_per_channel
        self.mem = [_BufTrack() for _ in range(nb)]
        self.pim = [_BufTrack() for _ in range(nb)]
        self.acts: list[int] = []          # all activation stamps, in order
        self.group_act = [-(10 ** 12)] * hw.bankgroups_per_channel
        self.col_at = -(10 ** 12)
        self.col_group = -1
        self.ref_at: int | None = None
        self.ref_times: list[int] = []
        self.violations: list[Violation] = []

    def _flag(self, cycle, rule, detail):
        self.violations.append(Violation(cycle, rule, detail))

    def _check_act(self, buf: _BufTrack, ev, group: int):
        t = self.t
        if ev.cycle < buf.pre_at + t.tRP:
            self._flag(ev.cycle, "tRP", f"ACT {ev.cycle - buf.pre_at} after PRE")
        if ev.cycle < self.group_act[group] + t.tRRD_L:
            self._flag(ev.cycle, "tRRD_L",
                       f"ACT-to-ACT gap {ev.cycle - self.group_act[group]} in group {group}")
        if buf.row is not None:
            self._flag(ev.cycle, "state", "ACT on a buffer with an open row")

    def _account_acts(self, cycle: int, n: int, group: int):
        for _ in range(n):
            if len(self.acts) >= 4 and cycle < self.acts[-4] + self.t.tFAW:
                self._flag(cycle, "tFAW",
                           f"5th activation {cycle - self.acts[-4]} after window start")
            self.acts.append(cycle)
        self.group_act[group] = cycle

    def _check_pre(self, buf: _BufTrack, ev):
        if buf.row is None:
            return
        if ev.cycle < buf.act_at + self.t.tRAS:
            self._flag(ev.cycle, "tRAS", f"PRE {ev.cycle - buf.act_at} after ACT")
        if ev.cycle < buf.wr_at + self.t.tWR:
            self._flag(ev.cycle, "tWR", f"PRE {ev.cycle - buf.wr_at} after WR")

    def _check_refresh_window(self, ev):
        if self.ref_at is not None and ev.cycle < self.ref_at + self.t.tRFC:
            self._flag(ev.cycle, "tRFC", f"{ev.kind} inside a refresh window")

    def feed(self, ev) -> None:
        t = self.t
        if ev.kind != "REF":
            self._check_refresh_window(ev)

        if ev.kind == "ACT":
            buf = self.mem[ev.bank]
            group = ev.bank // self.hw.banks_per_bankgroup
            self._check_act(buf, ev, group)
            self._account_acts(ev.cycle, 1, group)
            buf.row = ev.row
            buf.act_at = ev.cycle
            buf.wr_at = -(10 ** 12)
        elif ev.kind in ("RD", "WR"):
            buf = self.mem[ev.bank]
            group = ev.bank // self.hw.banks_per_bankgroup
            if buf.row != ev.row:
                self._flag(ev.cycle, "state", f"{ev.kind} to row {ev.row}, open {buf.row}")
            if ev.cycle < buf.act_at + t.tRCD:
                self._flag(ev.cycle, "tRCD", f"{ev.kind} {ev.cycle - buf.act_at} after ACT")
            ccd = t.tCCD_L if group == self.col_group else t.tCCD_S
            if ev.cycle < self.col_at + ccd:
                self._flag(ev.cycle, "tCCD_L" if ccd == t.tCCD_L else "tCCD_S",
                           f"column gap {ev.cycle - self.col_at}")
            self.col_at = ev.cycle
            self.col_group = group
            if ev.kind == "WR":
                buf.wr_at = ev.cycle
        elif ev.kind == "PRE":
            buf = self.mem[ev.bank]
            self._check_pre(buf, ev)
            buf.row = None
            buf.pre_at = ev.cycle
        elif ev.kind == "PIM_ACTIVATION":
            group = ev.bank  # group index travels in the bank field
            first = group * self.hw.banks_per_bankgroup
            for b in range(first, first + self.hw.banks_per_bankgroup):
                self._check_act(self.pim[b], ev, group)
            self._account_acts(ev.cycle, self.hw.banks_per_bankgroup, group)
            for b in range(first, first + self.hw.banks_per_bankgroup):
                self.pim[b].row = ev.row
                self.pim[b].act_at = ev.cycle
        elif ev.kind == "PIM_PRECHARGE":
            for buf in self.pim:
                self._check_pre(buf, ev)
                if buf.row is not None:
                    buf.row = None
                    buf.pre_at = ev.cycle
        elif ev.kind == "PIM_DOTPRODUCT":
            for b, buf in enumerate(self.pim):
                if buf.row is not None and ev.cycle < buf.act_at + t.tRCD:
                    self._flag(ev.cycle, "tRCD",
                               f"dot-product {ev.cycle - buf.act_at} after PIM ACT on bank {b}")
        elif ev.kind == "REF":
            if self.ref_times:
                gap = ev.cycle - self.ref_times[-1]
                if gap > 2 * t.tREFI:
                    self._flag(ev.cycle, "tREFI", f"refresh gap {gap}")
            for buf in list(self.mem) + list(self.pim):
                self._check_pre(buf, ev)
                buf.row = None
                buf.pre_at = ev.cycle
            self.ref_at = ev.cycle
            self.ref_times.append(ev.cycle)
        # PIM_HEADER / PIM_GEMV / PIM_GWRITE / PIM_RDRESULT carry no
        # DRAM-array timing of their own beyond the refresh window check.

    def check(self, trace) -> list[Violation]:
        for ev in trace:
            self.feed(ev)
        return self.violations


def check_trace(hw, trace) -> list[Violation]:
    """All timing violations in one channel's accepted trace."""
    return TraceChecker(hw).check(trace)


MEM_KINDS = frozenset({"ACT", "RD", "WR", "PRE"})
PIM_KINDS = frozenset({
    "PIM_HEADER", "PIM_GWRITE", "PIM_ACTIVATION", "PIM_GEMV",
    "PIM_DOTPRODUCT", "PIM_RDRESULT", "PIM_PRECHARGE",
})


def mem_state_trajectory(hw, trace, include_pim: bool = True):
    """MEM-buffer state after every MEM-class event of a trace.

    Used for the buffer-independence property: with dual row buffers,
    stripping all PIM commands from a trace must leave this trajectory
    unchanged (and vice versa for the PIM projection).
    """
    rows: list[int | None] = [None] * hw.banks_per_channel
    out = []
    for ev in trace:
        if ev.kind in PIM_KINDS and not include_pim:
            continue
        if ev.kind == "ACT":
            rows[ev.bank] = ev.row
        elif ev.kind == "PRE":
            rows[ev.bank] = None
        elif ev.kind == "REF":
            rows = [None] * hw.banks_per_channel
        if ev.kind in MEM_KINDS or ev.kind == "REF":
            out.append((ev.cycle, tuple(rows)))
    return out


def pim_state_trajectory(hw, trace, include_mem: bool = True):
    """PIM-buffer state after every PIM-class event (dual-buffer dual of
    :func:`mem_state_trajectory`)."""
    rows: list[int | None] = [None] * hw.banks_per_channel
    out = []
    for ev in trace:
        if ev.kind in MEM_KINDS and not include_mem:
            continue
        if ev.kind == "PIM_ACTIVATION":
            first = ev.bank * hw.banks_per_bankgroup
            for b in range(first, first + hw.banks_per_bankgroup):
                rows[b] = ev.row
        elif ev.kind == "PIM_PRECHARGE":
            rows = [None] * hw.banks_per_channel
        elif ev.kind == "REF":
            rows = [None] * hw.banks_per_channel
        if ev.kind in PIM_KINDS or ev.kind == "REF":
            out.append((ev.cycle, tuple(rows)))
    return out
