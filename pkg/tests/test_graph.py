import pytest

from hetsim.config import ModelConfig
from hetsim.graph import (
    GraphError, OpKind, OperatorNode, ResourceClass, build_decoder_block,
    mha_flops, profile,
)


def model(layers=2, heads=32, d_model=4096):
    return ModelConfig("test", layers, heads, d_model, 0, 1, 1)


class TestBuildDecoderBlock:
    def test_logit_nodes_carry_context_lengths(self):
        g = build_decoder_block(model(), [10, 20], layer_id=0)
        logits = g.by_kind(OpKind.LOGIT_GEMV)
        assert len(logits) == 2 * 32
        assert {n.shape[1] for n in logits} == {10, 20}
        qkv, = g.by_kind(OpKind.QKV_GEN)
        assert qkv.shape == (2, 12288, 4096)

    def test_minimal_instance(self):
        g = build_decoder_block(model(heads=1, d_model=64), [5], layer_id=0)
        assert len(g.by_kind(OpKind.LOGIT_GEMV)) == 1
        assert len(g.by_kind(OpKind.SOFTMAX)) == 1
        assert len(g.by_kind(OpKind.ATTEND_GEMV)) == 1

    def test_gpt3_13b_node_count(self):
        m = ModelConfig("gpt3-13b-like", 1, 40, 5120, 0, 1, 1)
        g = build_decoder_block(m, [100] * 256, layer_id=0)
        assert len(g.by_kind(OpKind.LOGIT_GEMV)) == 10240

    def test_total_node_count_formula(self):
        # 4 batched GEMMs + 4 batched vector nodes + 3*B*H attention nodes
        B, H = 3, 8
        g = build_decoder_block(model(heads=H, d_model=1024), [7] * B, 0)
        assert len(g.nodes) == 8 + 3 * B * H

    def test_per_request_tagging(self):
        g = build_decoder_block(model(heads=2, d_model=64), [4, 6], 0)
        for n in g.nodes:
            if n.kind in (OpKind.LOGIT_GEMV, OpKind.ATTEND_GEMV):
                assert n.request_id is not None and n.head_id is not None
            if n.kind in (OpKind.QKV_GEN, OpKind.PROJECTION, OpKind.FFN1,
                          OpKind.FFN2):
                assert n.request_id is None

    def test_dag_is_acyclic_and_dumps(self):
        g = build_decoder_block(model(heads=2, d_model=64), [4], 0)
        g.check_acyclic()
        text = g.dump()
        assert len(text.splitlines()) == len(g.nodes)
        assert "qkv_gen" in text

    def test_empty_batch_rejected(self):
        with pytest.raises(GraphError, match="empty"):
            build_decoder_block(model(), [], 0)

    def test_zero_context_rejected(self):
        with pytest.raises(GraphError):
            build_decoder_block(model(), [0], 0)

    def test_resource_classes(self):
        g = build_decoder_block(model(heads=2, d_model=64), [4], 0)
        by = {n.kind: n.resource for n in g.nodes}
        assert by[OpKind.QKV_GEN] is ResourceClass.NPU_S
        assert by[OpKind.LOGIT_GEMV] is ResourceClass.PIM
        assert by[OpKind.SOFTMAX] is ResourceClass.NPU_V


class TestProfile:
    def test_gemv_intensity_about_one(self):
        node = OperatorNode(0, OpKind.LOGIT_GEMV, (1, 4096, 4096), 0, 0, 0)
        prof = profile(node, data_width=2)
        assert prof.flops == 33_554_432
        assert 0.99 < prof.intensity < 1.01

    def test_gemm_intensity_grows_with_batch(self):
        n256 = OperatorNode(0, OpKind.FFN1, (256, 4096, 4096), 0)
        prof = profile(n256, data_width=2)
        assert 226 < prof.intensity < 229
        n512 = OperatorNode(0, OpKind.FFN1, (512, 4096, 4096), 0)
        assert profile(n512, 2).intensity > prof.intensity

    def test_gemv_intensity_independent_of_batch(self):
        a = profile(OperatorNode(0, OpKind.LOGIT_GEMV, (1, 128, 64), 0, 0, 0), 2)
        b = profile(OperatorNode(0, OpKind.LOGIT_GEMV, (1, 128, 64), 0, 1, 0), 2)
        assert a.intensity == b.intensity

    def test_zero_k_rejected(self):
        node = OperatorNode(0, OpKind.FFN1, (4, 4, 0), 0)
        with pytest.raises(GraphError, match="degenerate"):
            profile(node, 2)

    def test_vector_profile(self):
        node = OperatorNode(0, OpKind.SOFTMAX, (100,), 0, 0, 0)
        prof = profile(node, 2)
        assert prof.flops == 500
        assert prof.bytes == 400


class TestMhaFlops:
    def test_matches_bruteforce_counter(self):
        m = model(heads=4, d_model=512)
        lengths = [3, 17, 129]
        g = build_decoder_block(m, lengths, 0)
        # brute force: walk the graph, 2*N*K flops per GEMV node
        total = 0
        for n in g.nodes:
            if n.kind in (OpKind.LOGIT_GEMV, OpKind.ATTEND_GEMV):
                _, nn, kk = n.shape
                total += 2 * nn * kk
        assert mha_flops(m, lengths) == total
        d_h = 512 // 4
        assert total == sum(4 * (4 * L * d_h) for L in lengths) // 1  # 2 GEMVs x 2LK
