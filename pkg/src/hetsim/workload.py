"""Request-stream synthesis from dataset length distributions.

Length records are (input_len, output_len) token counts.  File mode
samples uniformly with replacement from a CSV of real traces; synthetic
mode draws from log-normal fits matched to the configured means, with
sigma fixed so the P5..P95 span covers roughly [0.1x, 4x] the mean (the
source distributions publish means only; the spread is a declared
modeling choice echoed in run metadata).
"""

from __future__ import annotations

import csv
import math
import random

from .config import WorkloadSpec
from .scheduler import BatchScheduler, Request

LOGNORMAL_SIGMA = 1.1


class DatasetError(ValueError):
    pass


def load_length_dataset(path: str) -> list[tuple[int, int]]:
    """Parse a `input_len,output_len` CSV; every row is kept, in order."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["input_len", "output_len"]:
            raise DatasetError(f"{path}: expected header 'input_len,output_len'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                inp, out = int(row[0]), int(row[1])
            except (ValueError, IndexError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed row {row!r}") from exc
            if inp <= 0 or out <= 0:
                raise DatasetError(f"{path}:{lineno}: non-positive length in {row!r}")
            records.append((inp, out))
    if not records:
        raise DatasetError(f"{path}: no records")
    return records


def _lognormal(rng: random.Random, mean: float) -> int:
    mu = math.log(mean) - LOGNORMAL_SIGMA ** 2 / 2
    return max(1, round(rng.lognormvariate(mu, LOGNORMAL_SIGMA)))


def sample_lengths(spec: WorkloadSpec, count: int,
                   rng: random.Random) -> list[tuple[int, int]]:
    if spec.dataset == "file":
        if not spec.length_records:
            raise DatasetError("file-mode workload has no length records")
        return [spec.length_records[rng.randrange(len(spec.length_records))]
                for _ in range(count)]
    return [(_lognormal(rng, spec.mean_input), _lognormal(rng, spec.mean_output))
            for _ in range(count)]


def synthesize_requests(spec: WorkloadSpec, count: int, rng_seed: int,
                        first_id: int = 0) -> list[Request]:
    """Deterministic request stream for a fixed seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = random.Random(rng_seed)
    lengths = sample_lengths(spec, count, rng)
    return [Request(first_id + i, inp, out) for i, (inp, out) in enumerate(lengths)]


class RequestSource:
    """Endless deterministic stream of requests feeding the pool."""

    def __init__(self, spec: WorkloadSpec, rng_seed: int):
        self.spec = spec
        self.rng = random.Random(rng_seed)
        self.next_id = 0

    def take(self, n: int) -> list[Request]:
        lengths = sample_lengths(self.spec, n, self.rng)
        reqs = [Request(self.next_id + i, inp, out)
                for i, (inp, out) in enumerate(lengths)]
        self.next_id += n
        return reqs


WARMUP_CAP = 10_000


def warmup_batch(spec: WorkloadSpec, sched: BatchScheduler,
                 source: RequestSource) -> list[Request]:
    """Stream admissions until the batch holds requests at mixed
    generation progress.

    Runs iteration boundaries (lifecycle only, no timing) until at least
    one admitted request has completed and been replaced and every
    resident has taken a generation step, capped at WARMUP_CAP
    iterations.  A batch of one needs no warm-up.
    """
    sched.submit(source.take(spec.batch_size * 2))
    plan = sched.iteration_boundary()
    if len(plan.active) < spec.batch_size:
        # KvCapacityError from admission would have surfaced already;
        # getting here means capacity admits fewer than batch_size
        raise KvWarmupError(
            f"KV capacity admits only {len(plan.active)} of {spec.batch_size} requests")
    if spec.batch_size == 1:
        return plan.active

    saw_replacement = False
    for _ in range(WARMUP_CAP):
        sched.advance_generation()
        if len(sched.pool) < spec.batch_size:
            sched.submit(source.take(spec.batch_size))
        plan = sched.iteration_boundary()
        if plan.completed and plan.admitted:
            saw_replacement = True
        elif saw_replacement:
            break
    return plan.active


class KvWarmupError(RuntimeError):
    pass
