import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from driftlm.corpus import BOS_ID, DomainCorpus
from driftlm.memory import (
    ReplayMemory,
    RepresentationQueue,
    dump_memory,
    rebalance_after_domain,
    sample_memory,
)


def corpus(domain_id, n, token=7):
    seqs = tuple((BOS_ID, token, i % 50 + 3) for i in range(n))
    return DomainCorpus(domain_id=domain_id, train=seqs, heldout=())


class TestRebalance:
    def test_two_domains_split_evenly(self):
        mem = ReplayMemory(capacity=100)
        mem = rebalance_after_domain(mem, corpus("d1", 500), seed=0)
        assert mem.domain_counts() == {"d1": 100}
        mem = rebalance_after_domain(mem, corpus("d2", 500), seed=1)
        assert mem.domain_counts() == {"d1": 50, "d2": 50}

    def test_three_domains_spread_at_most_one(self):
        mem = ReplayMemory(capacity=100)
        for i, d in enumerate(["d1", "d2", "d3"]):
            mem = rebalance_after_domain(mem, corpus(d, 500), seed=i)
        counts = mem.domain_counts()
        assert sum(counts.values()) == 100
        assert max(counts.values()) - min(counts.values()) <= 1
        assert sorted(counts.values(), reverse=True) == [34, 33, 33]

    def test_deterministic(self):
        a = rebalance_after_domain(ReplayMemory(64), corpus("d1", 300), seed=9)
        b = rebalance_after_domain(ReplayMemory(64), corpus("d1", 300), seed=9)
        assert a.entries == b.entries

    def test_shortfall_keeps_everything(self, caplog):
        mem = ReplayMemory(capacity=100)
        with caplog.at_level("WARNING"):
            mem = rebalance_after_domain(mem, corpus("tiny", 30), seed=0)
        assert mem.domain_counts() == {"tiny": 30}
        assert any("smaller than memory quota" in r.message for r in caplog.records)

    def test_same_domain_twice_rejected(self):
        mem = rebalance_after_domain(ReplayMemory(10), corpus("d1", 50), seed=0)
        with pytest.raises(ValueError, match="already"):
            rebalance_after_domain(mem, corpus("d1", 50), seed=1)

    def test_entries_come_from_train_split(self):
        c = corpus("d1", 200)
        mem = rebalance_after_domain(ReplayMemory(32), c, seed=3)
        train_set = set(c.train)
        assert all(seq in train_set for _, seq in mem.entries)

    @given(
        capacity=st.integers(1, 64),
        sizes=st.lists(st.integers(1, 120), min_size=2, max_size=5),
        seed=st.integers(0, 2**31 - 1),
    )
    @settings(max_examples=60, deadline=None)
    def test_balance_and_capacity_invariants(self, capacity, sizes, seed):
        mem = ReplayMemory(capacity=capacity)
        for i, n in enumerate(sizes):
            mem = rebalance_after_domain(mem, corpus(f"d{i}", n), seed=seed + i)
            assert len(mem) <= capacity
            counts = mem.domain_counts()
            full_quota = all(sizes[j] >= capacity for j in range(i + 1))
            if full_quota:
                assert max(counts.values()) - min(counts.values()) <= 1


class TestSample:
    def test_with_replacement_allows_oversized_batches(self):
        mem = rebalance_after_domain(ReplayMemory(4), corpus("d1", 50), seed=0)
        batch = sample_memory(mem, batch_size=32, seed=1)
        assert len(batch) == 32

    def test_frequency_uniform_over_two_entries(self):
        mem = ReplayMemory(capacity=2, entries=[("d", (BOS_ID, 3)), ("d", (BOS_ID, 4))], seen_domains=("d",))
        draws = sample_memory(mem, batch_size=10_000, seed=5)
        freq = sum(1 for s in draws if s == (BOS_ID, 3)) / len(draws)
        assert 0.47 <= freq <= 0.53

    def test_empty_memory_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            sample_memory(ReplayMemory(capacity=8), 4, seed=0)

    def test_deterministic(self):
        mem = rebalance_after_domain(ReplayMemory(16), corpus("d1", 100), seed=0)
        assert sample_memory(mem, 8, seed=3) == sample_memory(mem, 8, seed=3)


class TestQueue:
    def unit(self, *values):
        v = torch.tensor([list(values)], dtype=torch.float32)
        return v / v.norm()

    def test_fifo_eviction(self):
        q = RepresentationQueue(capacity=3)
        vecs = {}
        for name in "abcd":
            vecs[name] = self.unit(hash(name) % 7 + 1.0, 1.0)
            q.push(vecs[name])
        snap = q.snapshot()
        assert len(q) == 3
        expected = torch.cat([vecs["b"], vecs["c"], vecs["d"]])
        assert torch.equal(snap, expected)

    def test_snapshot_stable_under_later_pushes(self):
        q = RepresentationQueue(capacity=2)
        q.push(self.unit(1.0, 0.0))
        snap = q.snapshot()
        q.push(self.unit(0.0, 1.0))
        assert torch.equal(snap, self.unit(1.0, 0.0))

    def test_row_count_is_min_of_pushes_and_capacity(self):
        q = RepresentationQueue(capacity=5)
        q.push(torch.eye(3))
        assert q.snapshot().shape[0] == 3
        q.push(torch.eye(3))
        assert q.snapshot().shape[0] == 5

    def test_non_normalized_rejected(self):
        q = RepresentationQueue(capacity=2)
        with pytest.raises(ValueError, match="unit-norm"):
            q.push(torch.tensor([[2.0, 0.0]]))

    def test_entries_stay_unit_norm(self):
        q = RepresentationQueue(capacity=8)
        rng = np.random.default_rng(0)
        for _ in range(12):
            v = torch.tensor(rng.normal(size=(2, 6)), dtype=torch.float32)
            q.push(torch.nn.functional.normalize(v, dim=-1))
        norms = q.snapshot().norm(dim=-1)
        assert torch.allclose(norms, torch.ones_like(norms), atol=1e-5)

    def test_empty_snapshot_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            RepresentationQueue(capacity=2).snapshot()


def test_dump_format(tmp_path):
    mem = rebalance_after_domain(ReplayMemory(8), corpus("d1", 40), seed=0)
    path = tmp_path / "memory.txt"
    dump_memory(mem, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 8
    domain, seq = lines[0].split("\t")
    assert domain == "d1"
    assert all(tok.isdigit() for tok in seq.split())
