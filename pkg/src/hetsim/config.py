"""Hardware, model, and workload configuration.

The config file format is INI-style (parsed with :mod:`configparser`):
sections ``[hardware]``, ``[hardware.timing]``, ``[model]``, ``[workload]``,
all keys optional with documented defaults.  Unknown sections or keys are
rejected so that typos fail fast instead of silently falling back to a
default.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace


class ConfigError(ValueError):
    """Raised for unparseable config files or invariant violations."""


@dataclass(frozen=True)
class TimingParams:
    """DRAM timing parameters, in memory-clock cycles (HBM-class defaults)."""

    tRP: int = 14       # precharge to activate, same bank
    tRCD: int = 14      # activate to column command
    tRAS: int = 34      # activate to precharge minimum
    tRRD_L: int = 6     # activate to activate, same bankgroup
    tWR: int = 16       # write recovery before precharge
    tCCD_S: int = 1     # column to column, different bankgroup
    tCCD_L: int = 2     # column to column, same bankgroup
    tREFI: int = 3900   # average refresh interval
    tRFC: int = 260     # refresh cycle time (channel blocked)
    tFAW: int = 30      # four-activation window

    def validate(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"timing.{f.name} must be > 0")
        if self.tRAS < self.tRCD:
            raise ConfigError("timing.tRAS must be >= tRCD")
        if self.tREFI <= self.tRFC:
            raise ConfigError("timing.tREFI must be > tRFC")


@dataclass(frozen=True)
class HardwareConfig:
    """One accelerator device: systolic arrays, vector units, HBM channels
    with per-bank GEMV units."""

    systolic_arrays: int = 8
    systolic_dim: int = 128          # square PE array, rows == cols
    vector_units: int = 8
    vector_lanes: int = 128
    hbm_channels: int = 32
    banks_per_channel: int = 32
    banks_per_bankgroup: int = 4
    channel_capacity: int = 1 << 30  # bytes
    dram_page_size: int = 1024       # bytes, one DRAM row
    clock_freq: float = 1e9          # Hz
    timing: TimingParams = field(default_factory=TimingParams)
    mem_bytes_per_cycle_per_channel: int = 32
    pim_tile_latency: int = 32       # one row of elements through the bank multipliers
    gwrite_latency: int = 100        # copy one bank row into the global vector buffer
    data_width: int = 2              # bytes per element (fp16)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        positive = (
            "systolic_arrays", "systolic_dim", "vector_units", "vector_lanes",
            "hbm_channels", "banks_per_channel", "banks_per_bankgroup",
            "channel_capacity", "dram_page_size", "clock_freq",
            "mem_bytes_per_cycle_per_channel", "pim_tile_latency",
            "gwrite_latency", "data_width",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"hardware.{name} must be > 0")
        if self.banks_per_channel % self.banks_per_bankgroup:
            raise ConfigError(
                "hardware.banks_per_channel not divisible by banks_per_bankgroup")
        if self.dram_page_size % self.data_width:
            raise ConfigError("hardware.dram_page_size not divisible by data_width")
        self.timing.validate()

    @property
    def page_elems(self) -> int:
        """Elements held by one DRAM row (the unit a GEMV tile consumes)."""
        return self.dram_page_size // self.data_width

    @property
    def bankgroups_per_channel(self) -> int:
        return self.banks_per_channel // self.banks_per_bankgroup

    @property
    def total_mem_bytes_per_cycle(self) -> int:
        return self.mem_bytes_per_cycle_per_channel * self.hbm_channels

    def effective_tile_cycles(self) -> int:
        """Steady-state cycles per GEMV tile including row-activation pacing.

        Every tile consumes one fresh row per bank.  tFAW admits one
        grouped activation per window, so streaming a full round takes
        (groups-1) x tFAW, then tRCD before the dot product, the compute
        itself, and the broadcast precharge (tRP) before the next round's
        rows may open.  The window pacing (groups x tFAW) is the floor.
        """
        t = self.timing
        groups = self.bankgroups_per_channel
        act_stream = (groups - 1) * t.tFAW
        return max(self.pim_tile_latency, groups * t.tFAW,
                   act_stream + t.tRCD + self.pim_tile_latency + t.tRP)


@dataclass(frozen=True)
class ModelConfig:
    """Decoder-only transformer dimensions plus its parallelization degrees."""

    name: str = "gpt3-7b"
    num_layers: int = 32
    num_heads: int = 32
    d_model: int = 4096
    ffn_hidden: int = 0              # 0 -> default 4 x d_model
    tp_degree: int = 1
    pp_degree: int = 1

    def __post_init__(self) -> None:
        if self.ffn_hidden == 0:
            object.__setattr__(self, "ffn_hidden", 4 * self.d_model)
        self.validate()

    def validate(self) -> None:
        for name in ("num_layers", "num_heads", "d_model", "ffn_hidden",
                     "tp_degree", "pp_degree"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be > 0")
        if self.d_model % self.num_heads:
            raise ConfigError("model.d_model not divisible by num_heads")
        if self.num_heads % self.tp_degree:
            raise ConfigError("model.tp_degree does not divide num_heads")
        if self.num_layers % self.pp_degree:
            raise ConfigError("model.pp_degree does not divide num_layers")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads


# Public GPT-3 variants used throughout the experiments.
MODEL_PRESETS: dict[str, ModelConfig] = {
    "gpt3-7b": ModelConfig("gpt3-7b", 32, 32, 4096, 0, 4, 1),
    "gpt3-13b": ModelConfig("gpt3-13b", 40, 40, 5120, 0, 4, 1),
    "gpt3-30b": ModelConfig("gpt3-30b", 48, 56, 7168, 0, 4, 2),
    "gpt3-175b": ModelConfig("gpt3-175b", 96, 96, 12288, 0, 8, 4),
}

# Synthetic sequence-length presets: (mean input tokens, mean output tokens).
DATASET_PRESETS: dict[str, tuple[int, int]] = {
    "sharegpt": (80, 296),
    "alpaca": (12, 56),
}


@dataclass(frozen=True)
class WorkloadSpec:
    """Where request lengths come from and how large the serving batch is."""

    dataset: str = "synthetic"                    # "file" or "synthetic"
    length_records: tuple[tuple[int, int], ...] = ()
    mean_input: int = 80
    mean_output: int = 296
    batch_size: int = 256
    rng_seed: int = 1

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.dataset not in ("file", "synthetic"):
            raise ConfigError("workload.dataset must be 'file' or 'synthetic'")
        if self.batch_size < 1:
            raise ConfigError("workload.batch_size must be >= 1")
        if self.mean_input < 1 or self.mean_output < 1:
            raise ConfigError("workload.mean_input/mean_output must be >= 1")
        for rec in self.length_records:
            if rec[0] < 1 or rec[1] < 1:
                raise ConfigError(f"workload length record {rec} not >= 1")


_INT_FIELDS_HW = {
    "systolic_arrays", "systolic_dim", "vector_units", "vector_lanes",
    "hbm_channels", "banks_per_channel", "banks_per_bankgroup",
    "channel_capacity", "dram_page_size", "mem_bytes_per_cycle_per_channel",
    "pim_tile_latency", "gwrite_latency", "data_width",
}


def _parse_section(parser, section, known, caster, where):
    out = {}
    if not parser.has_section(section):
        return out
    for key, raw in parser.items(section):
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in [{where}]")
        try:
            out[key] = caster(key, raw)
        except ValueError as exc:
            raise ConfigError(f"[{where}] {key} = {raw!r}: {exc}") from exc
    return out


def load_config(path: str) -> tuple[HardwareConfig, ModelConfig, WorkloadSpec]:
    """Parse and validate a config file; defaults fill omitted keys."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return _from_parser(parser)


def loads_config(text: str) -> tuple[HardwareConfig, ModelConfig, WorkloadSpec]:
    """Like :func:`load_config` but from a string (round-trip testing)."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config text: {exc}") from exc
    return _from_parser(parser)


def _from_parser(parser) -> tuple[HardwareConfig, ModelConfig, WorkloadSpec]:
    known_sections = {"hardware", "hardware.timing", "model", "workload"}
    for section in parser.sections():
        if section not in known_sections:
            raise ConfigError(f"unknown section [{section}]")

    def hw_cast(key, raw):
        return int(raw) if key in _INT_FIELDS_HW else float(raw)

    hw_kw = _parse_section(parser, "hardware",
                           {f.name for f in fields(HardwareConfig)} - {"timing"},
                           hw_cast, "hardware")
    timing_kw = _parse_section(parser, "hardware.timing",
                               {f.name for f in fields(TimingParams)},
                               lambda k, v: int(v), "hardware.timing")
    hw = HardwareConfig(timing=TimingParams(**timing_kw), **hw_kw)

    model_kw = _parse_section(parser, "model",
                              {f.name for f in fields(ModelConfig)},
                              lambda k, v: v if k == "name" else int(v), "model")
    name = model_kw.get("name", "")
    if name in MODEL_PRESETS:
        model = replace(MODEL_PRESETS[name],
                        **{k: v for k, v in model_kw.items() if k != "name"})
    else:
        model = ModelConfig(**model_kw)

    wl_kw = _parse_section(parser, "workload",
                           {f.name for f in fields(WorkloadSpec)},
                           lambda k, v: v if k == "dataset" else int(v), "workload")
    workload = WorkloadSpec(**wl_kw)
    return hw, model, workload


def dump_config(hw: HardwareConfig, model: ModelConfig,
                workload: WorkloadSpec) -> str:
    """Serialize configs to the same format :func:`load_config` accepts."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["hardware"] = {
        f.name: repr(getattr(hw, f.name))
        for f in fields(HardwareConfig) if f.name != "timing"
    }
    parser["hardware.timing"] = {
        f.name: repr(getattr(hw.timing, f.name)) for f in fields(TimingParams)
    }
    parser["model"] = {f.name: repr(getattr(model, f.name))
                       for f in fields(ModelConfig) if f.name != "name"}
    parser["model"]["name"] = model.name
    parser["workload"] = {
        "dataset": workload.dataset,
        "mean_input": repr(workload.mean_input),
        "mean_output": repr(workload.mean_output),
        "batch_size": repr(workload.batch_size),
        "rng_seed": repr(workload.rng_seed),
    }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
