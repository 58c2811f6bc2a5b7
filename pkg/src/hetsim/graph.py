"""Per-iteration operator graph of a decoder block.

Builds the DAG for one decoder block over a batch: a batched QKV
generation GEMM, per-request per-head attention GEMVs with softmax in
between, then the batched projection and feed-forward GEMMs.  Attention
is deliberately left unbatched (selective batching): its operands are
per-request activations, so there is nothing to share.

Node count per layer for batch B and H heads:
    4 batched GEMM nodes + 4 batched vector nodes + 3*B*H per-request nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum


class OpKind(Enum):
    QKV_GEN = "qkv_gen"
    LOGIT_GEMV = "logit_gemv"
    SOFTMAX = "softmax"
    ATTEND_GEMV = "attend_gemv"
    PROJECTION = "projection"
    FFN1 = "ffn1"
    FFN2 = "ffn2"
    RESIDUAL = "residual"
    LAYERNORM = "layernorm"


GEMM_KINDS = frozenset({OpKind.QKV_GEN, OpKind.PROJECTION, OpKind.FFN1, OpKind.FFN2})
GEMV_KINDS = frozenset({OpKind.LOGIT_GEMV, OpKind.ATTEND_GEMV})
VECTOR_KINDS = frozenset({OpKind.SOFTMAX, OpKind.RESIDUAL, OpKind.LAYERNORM})


class ResourceClass(Enum):
    NPU_S = "npu-s"   # systolic arrays (GEMM)
    PIM = "pim"       # in-memory GEMV units
    NPU_V = "npu-v"   # SIMD vector units


def resource_class(kind: OpKind) -> ResourceClass:
    if kind in GEMM_KINDS:
        return ResourceClass.NPU_S
    if kind in GEMV_KINDS:
        return ResourceClass.PIM
    return ResourceClass.NPU_V


@dataclass(frozen=True)
class OperatorNode:
    """One operator instance.

    ``shape`` is (M, N, K) for matrix ops and (elements,) for vector ops.
    ``request_id``/``head_id`` are set only on per-request attention ops;
    batched GEMMs carry neither.
    """

    node_id: int
    kind: OpKind
    shape: tuple[int, ...]
    layer_id: int
    request_id: int | None = None
    head_id: int | None = None
    deps: tuple[int, ...] = ()

    @property
    def resource(self) -> ResourceClass:
        return resource_class(self.kind)


@dataclass(frozen=True)
class ArithmeticProfile:
    flops: int
    bytes: int

    @property
    def intensity(self) -> float:
        return self.flops / self.bytes


# Cost coefficient (ops per element) for vector kinds; softmax amortizes
# exp/max/sub/div/sum.
VECTOR_OP_COST = {OpKind.SOFTMAX: 5, OpKind.RESIDUAL: 1, OpKind.LAYERNORM: 4}


class GraphError(ValueError):
    pass


@dataclass
class DecoderBlockGraph:
    nodes: list[OperatorNode] = field(default_factory=list)

    def add(self, kind, shape, layer_id, deps=(), request_id=None, head_id=None):
        node = OperatorNode(len(self.nodes), kind, tuple(shape), layer_id,
                            request_id, head_id, tuple(deps))
        self.nodes.append(node)
        return node.node_id

    def by_kind(self, kind: OpKind) -> list[OperatorNode]:
        return [n for n in self.nodes if n.kind is kind]

    def check_acyclic(self) -> None:
        # deps always reference earlier ids by construction; verify anyway
        for n in self.nodes:
            for d in n.deps:
                if d >= n.node_id:
                    raise GraphError(f"node {n.node_id} depends on later node {d}")

    def dump(self) -> str:
        """One node per line: id kind shape layer req head deps."""
        lines = []
        for n in self.nodes:
            req = "-" if n.request_id is None else n.request_id
            head = "-" if n.head_id is None else n.head_id
            deps = ",".join(map(str, n.deps)) or "-"
            lines.append(f"{n.node_id} {n.kind.value} {n.shape} "
                         f"layer={n.layer_id} req={req} head={head} deps={deps}")
        return "\n".join(lines)


def build_decoder_block(model, requests, layer_id: int) -> DecoderBlockGraph:
    """Operator DAG of one decoder block for the given batch.

    ``requests`` supplies per-request context lengths (``context_len``
    attribute or plain int).  Shapes use the unsharded model dimensions;
    parallel sharding is applied by the cost model, not the graph.
    """
    if not requests:
        raise GraphError("empty batch")
    ctx = [r if isinstance(r, int) else r.context_len for r in requests]
    for i, L in enumerate(ctx):
        if L < 1:
            raise GraphError(f"request {i} has context length {L} < 1")

    B = len(requests)
    E = model.d_model
    H = model.num_heads
    d_h = model.head_dim
    g = DecoderBlockGraph()

    ln1 = g.add(OpKind.LAYERNORM, (B * E,), layer_id)
    qkv = g.add(OpKind.QKV_GEN, (B, 3 * E, E), layer_id, deps=(ln1,))

    attend_ids = []
    for i, L in enumerate(ctx):
        for h in range(H):
            logit = g.add(OpKind.LOGIT_GEMV, (1, L, d_h), layer_id,
                          deps=(qkv,), request_id=i, head_id=h)
            sm = g.add(OpKind.SOFTMAX, (L,), layer_id,
                       deps=(logit,), request_id=i, head_id=h)
            att = g.add(OpKind.ATTEND_GEMV, (1, d_h, L), layer_id,
                        deps=(sm,), request_id=i, head_id=h)
            attend_ids.append(att)

    proj = g.add(OpKind.PROJECTION, (B, E, E), layer_id, deps=tuple(attend_ids))
    res1 = g.add(OpKind.RESIDUAL, (B * E,), layer_id, deps=(proj,))
    ln2 = g.add(OpKind.LAYERNORM, (B * E,), layer_id, deps=(res1,))
    ffn1 = g.add(OpKind.FFN1, (B, model.ffn_hidden, E), layer_id, deps=(ln2,))
    ffn2 = g.add(OpKind.FFN2, (B, E, model.ffn_hidden), layer_id, deps=(ffn1,))
    g.add(OpKind.RESIDUAL, (B * E,), layer_id, deps=(ffn2,))

    g.check_acyclic()
    return g


def profile(node: OperatorNode, data_width: int) -> ArithmeticProfile:
    """Flops and memory traffic of one operator.

    GEMM: 2MNK flops over dw*(MK+KN+MN) bytes.  GEMV is the M=1 case.
    Vector ops: c_kind ops per element, element in + element out.
    """
    if node.kind in GEMM_KINDS or node.kind in GEMV_KINDS:
        m, n, k = node.shape
        if m <= 0 or n <= 0 or k <= 0:
            raise GraphError(f"degenerate shape {node.shape} on {node.kind}")
        flops = 2 * m * n * k
        nbytes = data_width * (m * k + k * n + m * n)
        return ArithmeticProfile(flops, nbytes)
    (elems,) = node.shape
    if elems <= 0:
        raise GraphError(f"degenerate shape {node.shape} on {node.kind}")
    flops = VECTOR_OP_COST[node.kind] * elems
    return ArithmeticProfile(flops, 2 * data_width * elems)


def mha_flops(model, requests) -> int:
    """Total attention flops for a batch: sum_i sum_h 4*L_i*d_h."""
    d_h = model.head_dim
    total = 0
    for r in requests:
        L = r if isinstance(r, int) else r.context_len
        total += model.num_heads * (2 * L * d_h + 2 * L * d_h)
    return total
