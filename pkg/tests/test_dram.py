import pytest

from hetsim.config import HardwareConfig, TimingParams
from hetsim.dram import (
    ChannelState, GemvDims, MemCommand, MemKind, PimCommand, PimKind,
    SimFault, estimate_gemv_duration,
)


@pytest.fixture
def hw():
    return HardwareConfig(hbm_channels=1)


@pytest.fixture
def chan(hw):
    return ChannelState(hw)


def mem(kind, bank=0, row=0, nbytes=0):
    return MemCommand(kind, 0, bank, row, 0, nbytes)


class TestCheckTiming:
    def test_act_after_pre_waits_trp(self, chan):
        chan.apply_mem_command(mem(MemKind.ACT, row=3), 0)
        # tRAS forces the precharge itself out to t=34
        pre_t = chan.check_timing(mem(MemKind.PRE), 0)
        assert pre_t == 34
        chan.apply_mem_command(mem(MemKind.PRE), pre_t)
        # PRE at t, ACT request at t+5 -> earliest PRE + tRP
        assert chan.check_timing(mem(MemKind.ACT, row=5), pre_t + 5) == pre_t + 14

    def test_rd_after_act_waits_trcd(self, chan):
        chan.apply_mem_command(mem(MemKind.ACT, row=1), 0)
        assert chan.check_timing(mem(MemKind.RD, row=1, nbytes=32), 0) == 14

    def test_tfaw_window(self, chan):
        # 4 ACTs at 0, 6, 12, 18 (tRRD_L apart, different bankgroups ok);
        # a 5th activation waits for the window to slide: t = 0 + tFAW
        for i, t in enumerate([0, 6, 12, 18]):
            assert chan.check_timing(mem(MemKind.ACT, bank=i * 4, row=1), t) == t
            chan.apply_mem_command(mem(MemKind.ACT, bank=i * 4, row=1), t)
        assert chan.check_timing(mem(MemKind.ACT, bank=16, row=1), 19) == 30

    def test_trrd_same_bankgroup(self, chan):
        chan.apply_mem_command(mem(MemKind.ACT, bank=0, row=1), 0)
        assert chan.check_timing(mem(MemKind.ACT, bank=1, row=1), 0) == 6

    def test_wr_to_pre_waits_twr(self, chan):
        chan.apply_mem_command(mem(MemKind.ACT, row=2), 0)
        chan.apply_mem_command(mem(MemKind.WR, row=2, nbytes=32), 20)
        assert chan.check_timing(mem(MemKind.PRE), 21) == 36  # WR + 16

    def test_ccd_same_vs_cross_group(self, chan):
        chan.apply_mem_command(mem(MemKind.ACT, bank=0, row=1), 0)
        chan.apply_mem_command(mem(MemKind.ACT, bank=4, row=1), 6)
        chan.apply_mem_command(mem(MemKind.RD, bank=0, row=1, nbytes=32), 14)
        # same bankgroup: tCCD_L = 2; different: tCCD_S = 1
        assert chan.check_timing(mem(MemKind.RD, bank=1, row=1, nbytes=32), 14) >= 16
        assert chan.check_timing(mem(MemKind.RD, bank=4, row=1, nbytes=32), 14) == 20

    def test_never_rejects(self, chan):
        # returns a legal cycle even for an immediately illegal request
        t = chan.check_timing(mem(MemKind.RD, row=9), 0)
        assert isinstance(t, int)


class TestApplyMemCommand:
    def test_act_touches_mem_buffer_only(self, chan):
        chan.apply_mem_command(mem(MemKind.ACT, bank=2, row=7), 0)
        bank = chan.banks[2]
        assert bank.mem_buf.row == 7
        assert bank.pim_buf.row is None

    def test_rd_bus_occupancy(self, chan):
        chan.apply_mem_command(mem(MemKind.ACT, row=1), 0)
        done = chan.apply_mem_command(mem(MemKind.RD, row=1, nbytes=64), 14)
        assert done == 16  # 64 B at 32 B/cycle

    def test_rd_wrong_row_faults(self, chan):
        chan.apply_mem_command(mem(MemKind.ACT, row=1), 0)
        with pytest.raises(SimFault):
            chan.apply_mem_command(mem(MemKind.RD, row=2, nbytes=32), 14)

    def test_refresh_blocks_channel(self, chan):
        end = chan.apply_mem_command(mem(MemKind.REF), 0)
        assert end == 260
        assert chan.check_timing(mem(MemKind.ACT, row=1), 5) == 260

    def test_premature_apply_faults(self, chan):
        chan.apply_mem_command(mem(MemKind.ACT, row=1), 0)
        with pytest.raises(SimFault):
            chan.apply_mem_command(mem(MemKind.RD, row=1, nbytes=32), 5)


def activation_round(chan, row, start):
    """Issue a full 8-group activation round, respecting timing."""
    t = start
    for g in range(chan.hw.bankgroups_per_channel):
        cmd = PimCommand(PimKind.ACTIVATION, 0, group=g, row=row)
        t = max(t, chan.check_timing(cmd, t))
        chan.apply_pim_command(cmd, t)
    return t


class TestApplyPimCommand:
    def test_gwrite_loads_global_buffer(self, chan):
        done = chan.apply_pim_command(PimCommand(PimKind.GWRITE, 0, bank=3, row=1), 0)
        assert done == 100
        assert chan.global_buffer_rows == 1
        assert chan.pim_busy_until == 100

    def test_gemv_without_header_faults(self, chan):
        chan.apply_pim_command(PimCommand(PimKind.GWRITE, 0), 0)
        with pytest.raises(SimFault, match="HEADER"):
            chan.apply_pim_command(PimCommand(PimKind.GEMV, 0, k=2), 100)

    def test_gemv_k_must_be_positive(self):
        with pytest.raises(SimFault):
            PimCommand(PimKind.GEMV, 0, k=0)

    def test_gemv_projection_is_k_tiles_plus_readout(self, chan, hw):
        chan.apply_pim_command(PimCommand(PimKind.GWRITE, 0), 0)
        chan.apply_pim_command(
            PimCommand(PimKind.HEADER, 0, dims=GemvDims(256, 512, 8)), 100)
        done = chan.apply_pim_command(
            PimCommand(PimKind.GEMV, 0, k=8, result_bytes=512), 101)
        # dot-product engine projection: 8 tiles x 32 cycles + 512 B readout
        assert done == 101 + 8 * 32 + 512 // 32

    def test_activation_sets_pim_buffers_of_group(self, chan):
        chan.apply_pim_command(PimCommand(PimKind.ACTIVATION, 0, group=1, row=9), 0)
        for b in range(4, 8):
            assert chan.banks[b].pim_buf.row == 9
        assert chan.banks[0].pim_buf.row is None
        assert chan.banks[4].mem_buf.row is None

    def test_precharge_idempotent_on_precharged(self, chan):
        done = chan.apply_pim_command(PimCommand(PimKind.PRECHARGE, 0), 0)
        assert done == 14  # legal no-op

    def test_tile_execution_follows_rounds(self, chan, hw):
        chan.apply_pim_command(PimCommand(PimKind.GWRITE, 0), 0)
        chan.apply_pim_command(
            PimCommand(PimKind.HEADER, 0, dims=GemvDims(64, 512, 2)), 100)
        chan.apply_pim_command(PimCommand(PimKind.GEMV, 0, k=2, result_bytes=64), 101)
        t = activation_round(chan, 0, 102)
        assert chan.gemv_ctx.tiles_remaining == 1
        pre = PimCommand(PimKind.PRECHARGE, 0)
        t2 = chan.check_timing(pre, t)
        assert t2 >= chan.gemv_ctx.last_tile_end  # tile must finish first
        chan.apply_pim_command(pre, t2)
        activation_round(chan, 1, t2 + 14)
        assert chan.gemv_ctx.tiles_remaining == 0
        assert chan.gemv_ctx.done_at is not None

    def test_same_row_conflict_faults(self, chan):
        chan.apply_mem_command(mem(MemKind.ACT, bank=0, row=5), 0)
        with pytest.raises(SimFault, match="both buffers|MEM buffer"):
            chan.apply_pim_command(
                PimCommand(PimKind.ACTIVATION, 0, group=0, row=5), 40)


class TestBufferIndependence:
    def test_mem_state_unaffected_by_pim_commands(self, hw):
        a = ChannelState(hw)
        b = ChannelState(hw)
        for c in (a, b):
            c.apply_mem_command(mem(MemKind.ACT, bank=1, row=3), 0)
        a.apply_pim_command(PimCommand(PimKind.ACTIVATION, 0, group=2, row=8), 31)
        assert [bk.mem_buf.row for bk in a.banks] == \
               [bk.mem_buf.row for bk in b.banks]

    def test_blocked_mode_aliases_buffers(self, hw):
        c = ChannelState(hw, dual_row_buffers=False)
        c.apply_mem_command(mem(MemKind.ACT, bank=0, row=3), 0)
        assert c.banks[0].pim_buf.row == 3  # one buffer, both views
        # a PIM activation on the same bank now faults: the row is open
        with pytest.raises(SimFault):
            c.apply_pim_command(PimCommand(PimKind.ACTIVATION, 0, group=0, row=4), 40)

    def test_dual_allows_distinct_rows_per_buffer(self, hw):
        c = ChannelState(hw)
        c.apply_mem_command(mem(MemKind.ACT, bank=0, row=3), 0)
        c.apply_pim_command(PimCommand(PimKind.ACTIVATION, 0, group=0, row=4), 31)
        assert c.banks[0].mem_buf.row == 3
        assert c.banks[0].pim_buf.row == 4


class TestGemvDurationEstimate:
    def test_dominates_simulated_small(self, hw):
        chan = ChannelState(hw)
        chan.apply_pim_command(PimCommand(PimKind.GWRITE, 0), 0)
        dims = GemvDims(64, 512, 2)
        chan.apply_pim_command(PimCommand(PimKind.HEADER, 0, dims=dims), 100)
        chan.apply_pim_command(PimCommand(PimKind.GEMV, 0, k=2,
                                          result_bytes=64 * 2), 101)
        start = 101
        t = activation_round(chan, 0, 102)
        pre = PimCommand(PimKind.PRECHARGE, 0)
        t2 = chan.check_timing(pre, t)
        chan.apply_pim_command(pre, t2)
        activation_round(chan, 1, t2 + 14)
        simulated = chan.gemv_ctx.done_at - start
        assert estimate_gemv_duration(dims, hw) >= simulated
