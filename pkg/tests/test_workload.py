import statistics

import pytest

from hetsim.config import WorkloadSpec
from hetsim.scheduler import MhaParams, BatchScheduler
from hetsim.workload import (
    DatasetError, KvWarmupError, RequestSource, load_length_dataset,
    sample_lengths, synthesize_requests, warmup_batch,
)


class TestLoadLengthDataset:
    def test_passthrough(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("input_len,output_len\n80,296\n12,56\n")
        assert load_length_dataset(str(p)) == [(80, 296), (12, 56)]

    def test_empty_body(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("input_len,output_len\n")
        with pytest.raises(DatasetError, match="no records"):
            load_length_dataset(str(p))

    def test_malformed_row_reports_line(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("input_len,output_len\nabc,5\n")
        with pytest.raises(DatasetError, match=":2"):
            load_length_dataset(str(p))

    def test_nonpositive_length(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("input_len,output_len\n5,0\n")
        with pytest.raises(DatasetError, match="non-positive"):
            load_length_dataset(str(p))

    def test_bad_header(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("in,out\n1,2\n")
        with pytest.raises(DatasetError, match="header"):
            load_length_dataset(str(p))


class TestSynthesizeRequests:
    def test_deterministic(self):
        spec = WorkloadSpec("synthetic", (), 80, 296, 8, 1)
        a = synthesize_requests(spec, 3, rng_seed=7)
        b = synthesize_requests(spec, 3, rng_seed=7)
        assert [(r.input_len, r.target_output_len) for r in a] == \
               [(r.input_len, r.target_output_len) for r in b]

    def test_synthetic_means_within_5pct(self):
        spec = WorkloadSpec("synthetic", (), 80, 296, 8, 1)
        reqs = synthesize_requests(spec, 10_000, rng_seed=11)
        mi = statistics.mean(r.input_len for r in reqs)
        mo = statistics.mean(r.target_output_len for r in reqs)
        assert abs(mi - 80) / 80 < 0.05
        assert abs(mo - 296) / 296 < 0.05

    def test_single_record_file_mode(self):
        spec = WorkloadSpec("file", ((12, 56),), 80, 296, 8, 1)
        reqs = synthesize_requests(spec, 4, rng_seed=5)
        assert all((r.input_len, r.target_output_len) == (12, 56) for r in reqs)

    def test_file_mode_support_matches_records(self):
        records = ((3, 4), (10, 20), (7, 9))
        spec = WorkloadSpec("file", records, 80, 296, 8, 1)
        reqs = synthesize_requests(spec, 500, rng_seed=2)
        seen = {(r.input_len, r.target_output_len) for r in reqs}
        assert seen == set(records)

    def test_empty_records_fail(self):
        spec = WorkloadSpec("file", (), 80, 296, 8, 1)
        with pytest.raises(DatasetError):
            synthesize_requests(spec, 4, rng_seed=5)

    def test_lengths_at_least_one(self):
        spec = WorkloadSpec("synthetic", (), 1, 1, 8, 1)
        reqs = synthesize_requests(spec, 1000, rng_seed=3)
        assert min(r.input_len for r in reqs) >= 1
        assert min(r.target_output_len for r in reqs) >= 1


def _sched(batch, pages=200_000, layers=2):
    params = MhaParams(256, 4, 270, 100, 512, 32)
    return BatchScheduler(n_channels=4, pages_per_channel=pages,
                          batch_size=batch, mha_params=params,
                          kv_token_bytes=512, page_bytes=1024, layers=layers)


class TestWarmupBatch:
    def test_fills_batch_with_varied_progress(self):
        spec = WorkloadSpec("synthetic", (), 12, 56, 64, 1)
        batch = warmup_batch(spec, _sched(64), RequestSource(spec, 1))
        assert len(batch) == 64
        assert len({r.generated_len for r in batch}) >= 2

    def test_batch_of_one_returns_immediately(self):
        spec = WorkloadSpec("synthetic", (), 12, 56, 1, 1)
        batch = warmup_batch(spec, _sched(1), RequestSource(spec, 1))
        assert len(batch) == 1
        assert batch[0].generated_len == 0

    def test_capacity_too_small(self):
        spec = WorkloadSpec("file", ((64, 64),), 12, 56, 64, 1)
        with pytest.raises(KvWarmupError, match="KV capacity"):
            warmup_batch(spec, _sched(64, pages=600), RequestSource(spec, 1))

    def test_deterministic(self):
        spec = WorkloadSpec("synthetic", (), 12, 56, 16, 9)
        a = warmup_batch(spec, _sched(16), RequestSource(spec, 9))
        b = warmup_batch(spec, _sched(16), RequestSource(spec, 9))
        assert [(r.id, r.generated_len) for r in a] == \
               [(r.id, r.generated_len) for r in b]
