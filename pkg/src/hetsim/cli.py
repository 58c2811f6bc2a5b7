"""Experiment runner.

`hetsim run` expands a grid of models x batch sizes x modes x ablation
flags x parallelism x seeds, writes one metrics JSON per run plus an
aggregate CSV.  `hetsim compare` reports per-key throughput ratios
between two aggregate CSVs with a geometric-mean summary.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

from .config import (
    ConfigError, DATASET_PRESETS, MODEL_PRESETS, HardwareConfig, ModelConfig,
    WorkloadSpec, load_config,
)
from .engine import MODES, SimParams, Simulation, npu_only, overlap, pim_blocked
from .workload import load_length_dataset

CSV_COLUMNS = ["model", "batch", "dataset", "mode", "flags", "tp", "pp", "seed",
               "tokens_per_s", "npu_util", "pim_util", "bw_util", "energy"]

EXIT_OK = 0
EXIT_RUN_FAILURE = 1
EXIT_SPEC_ERROR = 2


@dataclass(frozen=True)
class RunKey:
    model: str
    batch: int
    dataset: str
    mode: str
    flags: str
    tp: int
    pp: int
    seed: int

    def filename(self) -> str:
        return (f"{self.model}_b{self.batch}_{self.dataset}_{self.mode}"
                f"{'_' + self.flags if self.flags else ''}"
                f"_tp{self.tp}pp{self.pp}_s{self.seed}.json")


def _mode_for(name: str, flags: str):
    if name == "overlap" and flags:
        parts = set(flags.split("+"))
        return overlap(dual_row_buffers="drb" in parts,
                       greedy_packing="gmlbp" in parts,
                       subbatch_interleaving="sbi" in parts)
    return MODES[name]()


def _workload_for(dataset: str, batch: int, seed: int) -> tuple[WorkloadSpec, str]:
    if dataset in DATASET_PRESETS:
        mean_in, mean_out = DATASET_PRESETS[dataset]
        return WorkloadSpec("synthetic", (), mean_in, mean_out, batch, seed), dataset
    records = tuple(load_length_dataset(dataset))
    name = os.path.splitext(os.path.basename(dataset))[0]
    return WorkloadSpec("file", records, 80, 296, batch, seed), name


def execute_run(args_tuple):
    """One grid cell; runs in a worker process."""
    key, hw, model, workload, params, iterations = args_tuple
    mode = _mode_for(key.mode, key.flags)
    sim = Simulation(hw, model, workload, mode, params, seed=key.seed)
    result = sim.run(iterations)
    metrics = result.metrics.to_dict(hw, params)
    return key, metrics


def cmd_run(args) -> int:
    if args.config:
        hw, model, _ = load_config(args.config)
    else:
        hw = HardwareConfig()
        if args.model not in MODEL_PRESETS:
            print(f"unknown model '{args.model}'", file=sys.stderr)
            return EXIT_SPEC_ERROR
        model = MODEL_PRESETS[args.model]
    if args.tp:
        model = replace(model, tp_degree=args.tp)
    if args.pp:
        model = replace(model, pp_degree=args.pp)
    model.validate()

    params = SimParams(measure_iterations=args.iterations)
    modes = args.mode.split(",")
    if args.ablate:
        modes = []
        cumulative = []
        for flag in args.ablate.split(","):
            cumulative.append(flag.strip())
            modes.append("overlap:" + "+".join(cumulative))

    grid = []
    for batch in args.batch:
        for mode_spec in modes:
            mode_name, _, flags = mode_spec.partition(":")
            if mode_name not in MODES:
                print(f"unknown mode '{mode_name}'", file=sys.stderr)
                return EXIT_SPEC_ERROR
            for seed in args.seed:
                workload, ds_name = _workload_for(args.dataset, batch, seed)
                key = RunKey(model.name, batch, ds_name, mode_name, flags,
                             model.tp_degree, model.pp_degree, seed)
                grid.append((key, hw, model, workload, params, args.iterations))

    outdir = args.out
    os.makedirs(outdir, exist_ok=True)
    agg_path = os.path.join(outdir, "results.csv")
    if os.path.exists(agg_path) and not args.force:
        print(f"{agg_path} exists; use --force to overwrite", file=sys.stderr)
        return EXIT_SPEC_ERROR

    rows = []
    failures = 0
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(execute_run, grid))
    else:
        results = []
        for cell in grid:
            try:
                results.append(execute_run(cell))
            except Exception as exc:  # keep partial results
                failures += 1
                print(f"run {cell[0]} failed: {exc}", file=sys.stderr)
    for key, metrics in results:
        path = os.path.join(outdir, key.filename())
        if os.path.exists(path) and not args.force:
            print(f"{path} exists; use --force to overwrite", file=sys.stderr)
            return EXIT_SPEC_ERROR
        payload = {"model": key.model, "batch": key.batch, "dataset": key.dataset,
                   "mode": key.mode, "flags": key.flags, "tp": key.tp,
                   "pp": key.pp, "seed": key.seed}
        payload.update(metrics)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
        rows.append([key.model, key.batch, key.dataset, key.mode, key.flags,
                     key.tp, key.pp, key.seed,
                     f"{metrics['tokens_per_s']:.3f}",
                     f"{metrics['npu_util']:.4f}", f"{metrics['pim_util']:.4f}",
                     f"{metrics['bw_util']:.4f}", f"{metrics['energy_units']:.1f}"])

    rows.sort(key=lambda r: (r[0], int(r[1]), r[2], r[3], r[4], int(r[7])))
    with open(agg_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {agg_path}")
    return EXIT_RUN_FAILURE if failures else EXIT_OK


def _load_csv(path: str) -> dict[tuple, dict]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = tuple(row[c] for c in
                        ("model", "batch", "dataset", "mode", "flags", "tp", "pp", "seed"))
            out[key] = row
    return out


def cmd_compare(args) -> int:
    base = _load_csv(args.baseline)
    cand = _load_csv(args.candidate)
    missing = sorted(set(base) ^ set(cand))
    if missing:
        for key in missing:
            print(f"key mismatch: {key}", file=sys.stderr)
        return EXIT_SPEC_ERROR
    ratios = []
    print("model,batch,dataset,mode,flags,tp,pp,seed,throughput_ratio")
    for key in sorted(base):
        b = float(base[key]["tokens_per_s"])
        c = float(cand[key]["tokens_per_s"])
        ratio = c / b if b else math.inf
        ratios.append(ratio)
        print(",".join(key) + f",{ratio:.4f}")
    gmean = math.exp(sum(math.log(r) for r in ratios) / len(ratios))
    print(f"geomean,{gmean:.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hetsim",
                                     description="NPU+PIM decode simulator")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="execute an experiment grid")
    p_run.add_argument("--model", default="gpt3-7b",
                       help=f"one of {', '.join(MODEL_PRESETS)}")
    p_run.add_argument("--config", help="config file overriding the presets")
    p_run.add_argument("--batch", type=lambda s: [int(x) for x in s.split(",")],
                       default=[256], help="comma-separated batch sizes")
    p_run.add_argument("--dataset", default="sharegpt",
                       help="preset name (sharegpt, alpaca) or CSV path")
    p_run.add_argument("--mode", default="overlap",
                       help="comma-separated: npu-only, pim-blocked, overlap")
    p_run.add_argument("--ablate",
                       help="cumulative flag series over the overlap mode, "
                            "e.g. drb,gmlbp,sbi")
    p_run.add_argument("--tp", type=int, default=0, help="override tensor parallelism")
    p_run.add_argument("--pp", type=int, default=0, help="override pipeline parallelism")
    p_run.add_argument("--seed", type=lambda s: [int(x) for x in s.split(",")],
                       default=list(range(1, 11)), help="comma-separated seeds")
    p_run.add_argument("--iterations", type=int, default=24,
                       help="measured iterations after warm-up")
    p_run.add_argument("--out", default=os.environ.get("HETSIM_OUT", "runs"),
                       help="output directory")
    p_run.add_argument("--jobs", type=int, default=1, help="parallel runs")
    p_run.add_argument("--force", action="store_true", help="overwrite outputs")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="throughput ratios between two CSVs")
    p_cmp.add_argument("baseline")
    p_cmp.add_argument("candidate")
    p_cmp.set_defaults(func=cmd_compare)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SPEC_ERROR


if __name__ == "__main__":
    sys.exit(main())
