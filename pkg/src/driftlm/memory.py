"""Fixed-size replay memory and the teacher-representation queue.

The replay memory keeps a domain-balanced sample of raw training
sequences; it is repopulated once per domain boundary, so plain uniform
subsampling (rather than reservoir bookkeeping) is enough. The
representation queue caches teacher-side sentence vectors for
batch-versus-queue similarity distillation and is flushed whenever the
teacher changes.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import DomainCorpus, TokenSequence

log = logging.getLogger(__name__)


@dataclass
class ReplayMemory:
    """Domain-balanced store of (domain_id, sequence) pairs, capacity |M|."""

    capacity: int
    entries: list[tuple[str, TokenSequence]] = field(default_factory=list)
    seen_domains: tuple[str, ...] = ()

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("memory capacity must be >= 1")

    def __len__(self) -> int:
        return len(self.entries)

    def domain_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {d: 0 for d in self.seen_domains}
        for domain_id, _ in self.entries:
            counts[domain_id] += 1
        return counts


def rebalance_after_domain(memory: ReplayMemory, finished_domain: DomainCorpus, seed: int) -> ReplayMemory:
    """Repopulate the memory when pretraining on a domain finishes.

    After t domains each domain holds floor(|M|/t) or ceil(|M|/t) entries:
    quotas differ by at most one, with the remainder going to the earliest
    domains. Survivors from prior domains are a seeded uniform subsample of
    their existing entries; the new domain's entries are drawn uniformly
    without replacement from its train split. A domain whose train split is
    smaller than its quota contributes everything it has (logged).
    """
    if finished_domain.domain_id in memory.seen_domains:
        raise ValueError(f"domain {finished_domain.domain_id!r} already populated the memory")

    rng = np.random.default_rng(seed)
    domains = (*memory.seen_domains, finished_domain.domain_id)
    t = len(domains)
    base, extra = divmod(memory.capacity, t)
    quotas = {d: base + (1 if i < extra else 0) for i, d in enumerate(domains)}

    existing: dict[str, list[tuple[str, TokenSequence]]] = {d: [] for d in memory.seen_domains}
    for entry in memory.entries:
        existing[entry[0]].append(entry)

    new_entries: list[tuple[str, TokenSequence]] = []
    for d in memory.seen_domains:
        pool = existing[d]
        quota = min(quotas[d], len(pool))
        keep = rng.choice(len(pool), size=quota, replace=False)
        new_entries.extend(pool[i] for i in sorted(keep))

    train = finished_domain.train
    quota = quotas[finished_domain.domain_id]
    if len(train) < quota:
        log.warning(
            "domain %s train split (%d) smaller than memory quota (%d); storing all of it",
            finished_domain.domain_id, len(train), quota,
        )
        quota = len(train)
    picks = rng.choice(len(train), size=quota, replace=False)
    new_entries.extend((finished_domain.domain_id, train[i]) for i in sorted(picks))

    return ReplayMemory(capacity=memory.capacity, entries=new_entries, seen_domains=domains)


def sample_memory(memory: ReplayMemory, batch_size: int, seed: int) -> list[TokenSequence]:
    """Uniform-with-replacement draw of sequences from the memory."""
    if len(memory) == 0:
        raise ValueError("cannot sample from an empty replay memory")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(memory), size=batch_size)
    return [memory.entries[i][1] for i in picks]


def dump_memory(memory: ReplayMemory, path) -> None:
    """Audit dump: one line per entry, 'domain_id<TAB>space-separated ids'."""
    with open(path, "w") as fh:
        for domain_id, seq in memory.entries:
            fh.write(domain_id + "\t" + " ".join(str(t) for t in seq) + "\n")


class RepresentationQueue:
    """FIFO cache of unit-norm teacher sentence representations."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[torch.Tensor] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, reps: torch.Tensor) -> None:
        """Append rows of ``reps`` ([n, dim]), evicting oldest beyond capacity."""
        if reps.ndim != 2:
            raise ValueError("expected a [n, dim] matrix of representations")
        norms = reps.detach().norm(dim=-1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
            raise ValueError("queue entries must be unit-norm")
        for row in reps.detach():
            self._entries.append(row.clone())

    def snapshot(self) -> torch.Tensor:
        """Stable [len(queue), dim] copy, unaffected by later pushes."""
        if not self._entries:
            raise ValueError("queue is empty")
        return torch.stack(list(self._entries)).clone()

    def clear(self) -> None:
        self._entries.clear()
