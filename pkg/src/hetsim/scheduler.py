"""Request admission, KV-cache paging, channel placement, and sub-batch
partitioning.

Scheduling happens at iteration boundaries: finished requests leave the
batch and free their KV pages, queued requests join while both batch
slots and KV capacity allow.  New requests are placed onto channels by
greedy min-load bin packing over the estimated attention latency (or
round-robin, for the baseline policy), and the active set is split into
two near-equal sub-batches for interleaved execution.
"""

from __future__ import annotations

from array import array
from collections import deque
from dataclasses import dataclass, field
from enum import Enum


def ceildiv(a: int, b: int) -> int:
    return -(-a // b)


class RequestState(Enum):
    QUEUED = "queued"
    ACTIVE = "active"
    DONE = "done"


@dataclass
class Request:
    """One inference stream.  Output length is drawn up front, so the
    final KV footprint is known at admission time.

    ``kv_pages`` holds explicit page ids per layer when pages are
    allocated one by one; the engine's bulk path tracks the (identical)
    per-layer page count in ``pages_per_layer`` instead.
    """

    id: int
    input_len: int
    target_output_len: int
    generated_len: int = 0
    state: RequestState = RequestState.QUEUED
    channel: int | None = None
    kv_pages: list[array] = field(default_factory=list)  # per layer
    pages_per_layer: int = 0

    @property
    def context_len(self) -> int:
        return self.input_len + self.generated_len

    @property
    def finished(self) -> bool:
        return self.generated_len >= self.target_output_len


@dataclass(frozen=True)
class MhaParams:
    """Parameter block of the attention latency estimator."""

    embed_dim: int              # E
    n_head: int
    tile_latency: int           # L_tile: GEMV latency for one PIM tile
    gwrite_latency: int         # L_GWRITE
    page_elems: int             # P_DRAM, in elements
    banks_per_channel: int      # B_chnl

    def __post_init__(self):
        for name in ("embed_dim", "n_head", "tile_latency", "gwrite_latency",
                     "page_elems", "banks_per_channel"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def estimate_mha_latency(seq_len: int, p: MhaParams) -> int:
    """Estimated PIM cycles for one request's attention, from the KV
    layout: the score GEMV reads the key cache row-interleaved across
    banks, the value GEMV reads head embeddings interleaved across banks.
    All ratios round up so fractional tiles still cost a full tile."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    latency = 0
    # scores: Key^T x query
    slices = ceildiv(p.embed_dim, p.page_elems)
    n_tiles = ceildiv(seq_len, p.banks_per_channel) * slices
    latency += p.gwrite_latency * slices
    latency += p.tile_latency * n_tiles
    # attention-weighted values: logits x Value
    vec_slices = ceildiv(seq_len, p.page_elems) * p.n_head
    n_tiles = ceildiv(p.embed_dim // p.n_head, p.banks_per_channel) * vec_slices
    latency += p.gwrite_latency * vec_slices
    latency += p.tile_latency * n_tiles
    return latency


def pack_channels(new_reqs: list[Request], channels: list[list[Request]],
                  estimate, can_place=None) -> list[list[Request]]:
    """Greedy min-load bin packing of new requests onto channels.

    The load of a channel is the summed latency estimate of its resident
    requests; new requests are sorted by sequence length descending and
    each goes to the least-loaded channel (ties to the lowest index).
    ``can_place(req, channel)`` may veto a channel (KV capacity); a
    request no channel accepts raises :class:`AdmissionRefused`.
    """
    loads = [sum(estimate(r.context_len) for r in chnl) for chnl in channels]
    for req in sorted(new_reqs, key=lambda r: -r.context_len):
        order = sorted(range(len(channels)), key=lambda c: (loads[c], c))
        for c in order:
            if can_place is None or can_place(req, c):
                channels[c].append(req)
                req.channel = c
                loads[c] += estimate(req.context_len)
                break
        else:
            raise AdmissionRefused(f"no channel can hold request {req.id}")
    return channels


def round_robin_channels(new_reqs, channels, can_place=None):
    """Baseline placement policy: requests cycle through channels."""
    n = len(channels)
    cursor = 0
    for req in new_reqs:
        for probe in range(n):
            c = (cursor + probe) % n
            if can_place is None or can_place(req, c):
                channels[c].append(req)
                req.channel = c
                cursor = c + 1
                break
        else:
            raise AdmissionRefused(f"no channel can hold request {req.id}")
    return channels


def partition_subbatches(per_channel: list[list[Request]]):
    """Split each channel's residents in half, alternating which
    sub-batch receives the extra request of odd-sized channels.  The
    alternation flag resets every call."""
    turn = True
    sb1: list[Request] = []
    sb2: list[Request] = []
    for reqs in per_channel:
        size = len(reqs)
        bsize = size // 2
        if size % 2 != 0:
            bsize = bsize + 1 if turn else bsize
            turn = not turn
        sb1.extend(reqs[:bsize])
        sb2.extend(reqs[bsize:])
    return sb1, sb2


class AdmissionRefused(RuntimeError):
    pass


class KvCapacityError(RuntimeError):
    pass


class KvPageTable:
    """Per-channel free lists of DRAM-row-sized pages.

    Page ids are (channel, index) pairs flattened to ints; freed ids are
    recycled before fresh ones are minted so Σ allocated + free stays
    equal to capacity.  ``reserve``/``release`` move page counts without
    minting ids (the engine's bulk path); both draw on the same pool.
    """

    def __init__(self, n_channels: int, pages_per_channel: int):
        self.n_channels = n_channels
        self.capacity = pages_per_channel
        self.used = [0] * n_channels
        self._fresh = [0] * n_channels
        self._recycled: list[list[int]] = [[] for _ in range(n_channels)]

    def free_pages(self, channel: int) -> int:
        return self.capacity - self.used[channel]

    def reserve(self, channel: int, n: int) -> None:
        if self.used[channel] + n > self.capacity:
            raise KvCapacityError(
                f"channel {channel} KV pool exhausted "
                f"({self.used[channel]}/{self.capacity} pages used, {n} requested)")
        self.used[channel] += n

    def release(self, channel: int, n: int) -> None:
        self.used[channel] -= n

    def alloc(self, channel: int, n: int = 1) -> list[int]:
        self.reserve(channel, n)
        ids = []
        pool = self._recycled[channel]
        while pool and len(ids) < n:
            ids.append(pool.pop())
        while len(ids) < n:
            ids.append(channel * self.capacity + self._fresh[channel])
            self._fresh[channel] += 1
        return ids

    def free(self, channel: int, ids) -> None:
        self._recycled[channel].extend(ids)
        self.used[channel] -= len(ids)


@dataclass
class IterationPlan:
    index: int
    active: list[Request]
    per_channel: list[list[Request]]
    sb1: list[Request]
    sb2: list[Request]
    admitted: list[int]
    completed: list[int]
    per_channel_load: list[int]

    def to_json_dict(self) -> dict:
        return {
            "iteration": self.index,
            "admitted": self.admitted,
            "completed": self.completed,
            "per_channel_load": self.per_channel_load,
            "sb1": [r.id for r in self.sb1],
            "sb2": [r.id for r in self.sb2],
        }


class BatchScheduler:
    """Iteration-level scheduler owning the pool, the active batch, and
    the KV page table."""

    def __init__(self, n_channels: int, pages_per_channel: int, batch_size: int,
                 mha_params: MhaParams, kv_token_bytes: int, page_bytes: int,
                 layers: int, greedy_packing: bool = True):
        self.kv = KvPageTable(n_channels, pages_per_channel)
        self.batch_size = batch_size
        self.params = mha_params
        self.kv_token_bytes = kv_token_bytes   # bytes added per token per layer, per K or V
        self.page_bytes = page_bytes
        self.layers = layers
        self.greedy = greedy_packing
        self.pool: deque[Request] = deque()
        self.per_channel: list[list[Request]] = [[] for _ in range(n_channels)]
        # admission reserves the final KV footprint up front (output length
        # is known), so active requests can never hit OOM mid-generation
        self.reserved = [0] * n_channels
        self.iteration = 0

    # ---- paging ------------------------------------------------------

    def _pages_for(self, tokens: int) -> int:
        """KV pages per layer at a given context length (K plus V)."""
        return 2 * ceildiv(tokens * self.kv_token_bytes, self.page_bytes)

    def request_max_pages(self, req: Request) -> int:
        final = req.input_len + req.target_output_len
        return self.layers * self._pages_for(final)

    def allocate_kv_page(self, channel: int, req: Request, layer: int) -> int:
        """Pop one page for a resident request; OOM propagates up."""
        if req.channel != channel:
            raise KvCapacityError(f"request {req.id} is not resident on channel {channel}")
        if not req.kv_pages:
            req.kv_pages = [array("q") for _ in range(self.layers)]
        (page,) = self.kv.alloc(channel, 1)
        req.kv_pages[layer].append(page)
        return page

    def _grow_request(self, req: Request, tokens: int) -> None:
        need = self._pages_for(tokens)
        delta = need - req.pages_per_layer
        if delta > 0:
            self.kv.reserve(req.channel, delta * self.layers)
            req.pages_per_layer = need

    def _release_request(self, req: Request) -> None:
        self.reserved[req.channel] -= self.request_max_pages(req)
        self.kv.release(req.channel, req.pages_per_layer * self.layers)
        req.pages_per_layer = 0
        for layer, pages in enumerate(req.kv_pages):
            self.kv.free(req.channel, pages)
            req.kv_pages[layer] = array("q")

    # ---- admission ---------------------------------------------------

    def _fits(self, req: Request, channel: int) -> bool:
        return self.reserved[channel] + self.request_max_pages(req) <= self.kv.capacity

    def _try_reserve(self, req: Request, channel: int) -> bool:
        """Placement-order capacity check; reserves on success (the packer
        places the request immediately after a True answer)."""
        if not self._fits(req, channel):
            return False
        self.reserved[channel] += self.request_max_pages(req)
        return True

    def submit(self, requests) -> None:
        self.pool.extend(requests)

    @property
    def active(self) -> list[Request]:
        return [r for chnl in self.per_channel for r in chnl]

    def iteration_boundary(self) -> IterationPlan:
        """Retire finished requests, admit queued ones, and emit the plan
        for the next iteration."""
        completed = []
        for chnl in self.per_channel:
            for req in [r for r in chnl if r.finished]:
                req.state = RequestState.DONE
                self._release_request(req)
                req.channel = None
                chnl.remove(req)
                completed.append(req.id)

        active_count = sum(len(c) for c in self.per_channel)
        admissions: list[Request] = []
        while self.pool and active_count + len(admissions) < self.batch_size:
            candidate = self.pool[0]
            if not any(self._fits(candidate, c)
                       for c in range(self.kv.n_channels)):
                break  # refused admissions stay queued
            admissions.append(self.pool.popleft())

        if admissions:
            try:
                if self.greedy:
                    pack_channels(admissions, self.per_channel,
                                  lambda L: estimate_mha_latency(L, self.params),
                                  can_place=self._try_reserve)
                else:
                    round_robin_channels(admissions, self.per_channel,
                                         can_place=self._try_reserve)
            except AdmissionRefused:
                # same-wave reservations filled up; requeue the leftovers
                refused = [r for r in admissions if r.channel is None]
                for r in reversed(refused):
                    self.pool.appendleft(r)
                admissions = [r for r in admissions if r.channel is not None]
            for req in admissions:
                req.state = RequestState.ACTIVE
                self._grow_request(req, req.input_len)  # prompt KV, prefilled off-device

        for chnl in self.per_channel:
            for req in chnl:
                if req.generated_len:
                    self._grow_request(req, req.context_len)

        sb1, sb2 = partition_subbatches(self.per_channel)
        loads = [sum(estimate_mha_latency(r.context_len, self.params) for r in chnl)
                 for chnl in self.per_channel]
        plan = IterationPlan(self.iteration, self.active,
                             [list(c) for c in self.per_channel],
                             sb1, sb2, [r.id for r in admissions], completed, loads)
        self.iteration += 1
        return plan

    def advance_generation(self) -> int:
        """One token generated per active request; returns the count."""
        n = 0
        for chnl in self.per_channel:
            for req in chnl:
                req.generated_len += 1
                n += 1
        return n
