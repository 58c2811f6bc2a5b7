import pytest

from hetsim.config import (
    ConfigError, HardwareConfig, MODEL_PRESETS, ModelConfig, TimingParams,
    WorkloadSpec, dump_config, load_config, loads_config,
)


class TestDefaults:
    def test_hardware_defaults(self):
        hw = HardwareConfig()
        assert hw.systolic_arrays == 8
        assert hw.systolic_dim == 128
        assert hw.hbm_channels == 32
        assert hw.banks_per_channel == 32
        assert hw.dram_page_size == 1024
        assert hw.channel_capacity == 1 << 30
        assert hw.clock_freq == 1e9

    def test_timing_defaults(self):
        t = TimingParams()
        assert (t.tRP, t.tRCD, t.tRAS, t.tRRD_L, t.tWR) == (14, 14, 34, 6, 16)
        assert (t.tCCD_S, t.tCCD_L, t.tREFI, t.tRFC, t.tFAW) == (1, 2, 3900, 260, 30)

    def test_model_presets(self):
        m = MODEL_PRESETS["gpt3-7b"]
        assert (m.num_layers, m.num_heads, m.d_model) == (32, 32, 4096)
        assert (m.tp_degree, m.pp_degree) == (4, 1)
        m = MODEL_PRESETS["gpt3-175b"]
        assert (m.num_layers, m.num_heads, m.d_model) == (96, 96, 12288)
        assert (m.tp_degree, m.pp_degree) == (8, 4)

    def test_ffn_defaults_to_4x(self):
        m = ModelConfig("x", 2, 4, 128)
        assert m.ffn_hidden == 512

    def test_data_width_default_fp16(self):
        assert HardwareConfig().data_width == 2
        assert HardwareConfig().page_elems == 512


class TestValidation:
    def test_d_model_not_divisible(self):
        with pytest.raises(ConfigError, match="divisible"):
            ModelConfig("bad", 2, 32, 100)

    def test_tp_must_divide_heads(self):
        with pytest.raises(ConfigError, match="tp_degree"):
            ModelConfig("bad", 2, 4, 128, 0, 3, 1)

    def test_pp_must_divide_layers(self):
        with pytest.raises(ConfigError, match="pp_degree"):
            ModelConfig("bad", 5, 4, 128, 0, 1, 2)

    def test_timing_positive(self):
        with pytest.raises(ConfigError, match="tRP"):
            TimingParams(tRP=0).validate()

    def test_tras_at_least_trcd(self):
        with pytest.raises(ConfigError, match="tRAS"):
            TimingParams(tRAS=5).validate()

    def test_banks_divisible_by_group(self):
        with pytest.raises(ConfigError, match="bankgroup"):
            HardwareConfig(banks_per_channel=30)

    def test_batch_size_positive(self):
        with pytest.raises(ConfigError, match="batch_size"):
            WorkloadSpec(batch_size=0)


CONFIG_TEXT = """
[hardware]
systolic_arrays = 4
hbm_channels = 8

[hardware.timing]
tRP = 15

[model]
name = gpt3-7b
tp_degree = 2

[workload]
dataset = synthetic
mean_input = 40
mean_output = 100
batch_size = 16
rng_seed = 3
"""


class TestLoadConfig:
    def test_parses_and_overrides(self, tmp_path):
        path = tmp_path / "sim.ini"
        path.write_text(CONFIG_TEXT)
        hw, model, wl = load_config(str(path))
        assert hw.systolic_arrays == 4
        assert hw.hbm_channels == 8
        assert hw.timing.tRP == 15
        assert hw.timing.tRCD == 14  # untouched default
        assert model.num_layers == 32  # preset fills the rest
        assert model.tp_degree == 2
        assert wl.batch_size == 16

    def test_unknown_key_fails(self, tmp_path):
        path = tmp_path / "sim.ini"
        path.write_text("[hardware]\nsystolic_arays = 4\n")
        with pytest.raises(ConfigError, match="systolic_arays"):
            load_config(str(path))

    def test_unknown_section_fails(self, tmp_path):
        path = tmp_path / "sim.ini"
        path.write_text("[hardwear]\nx = 1\n")
        with pytest.raises(ConfigError, match="hardwear"):
            load_config(str(path))

    def test_invariant_violation_names_field(self, tmp_path):
        path = tmp_path / "sim.ini"
        path.write_text("[model]\nname = custom\nd_model = 100\nnum_heads = 32\n"
                        "num_layers = 2\n")
        with pytest.raises(ConfigError, match="d_model"):
            load_config(str(path))

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_config("/nonexistent/sim.ini")

    def test_round_trip(self):
        hw = HardwareConfig(systolic_arrays=4, timing=TimingParams(tRP=20))
        model = MODEL_PRESETS["gpt3-13b"]
        wl = WorkloadSpec(batch_size=64, mean_input=12, mean_output=56)
        hw2, model2, wl2 = loads_config(dump_config(hw, model, wl))
        assert hw2 == hw
        assert model2 == model
        assert (wl2.batch_size, wl2.mean_input, wl2.mean_output) == (64, 12, 56)


class TestEffectiveTile:
    def test_activation_paced(self):
        hw = HardwareConfig()
        # 8 groups x tFAW stream, then tRCD + compute + tRP turnaround
        assert hw.effective_tile_cycles() == 7 * 30 + 14 + 32 + 14

    def test_compute_floor(self):
        hw = HardwareConfig(pim_tile_latency=5000)
        # compute dominates but still rides inside the activate/precharge chain
        assert hw.effective_tile_cycles() == 7 * 30 + 14 + 5000 + 14
