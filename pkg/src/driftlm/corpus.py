"""Synthetic domain corpora, streams, and MLM masking.

Corpora are streams of integer token sequences drawn from seeded
mixture-of-topics generators. Two stream flavors are supported: a
domain-incremental stream whose domains use mostly-private vocabularies
(low overlap), and a chronological stream whose domains share one
vocabulary and topic set but drift their emission distributions over
time. Everything here is a pure function of its seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Special token ids. Content tokens start at NUM_SPECIAL.
PAD_ID = 0
BOS_ID = 1
MASK_ID = 2
NUM_SPECIAL = 3

TokenSequence = tuple[int, ...]

ORDERING_KINDS = ("domain-incremental", "chronological")


@dataclass(frozen=True)
class GeneratorSpec:
    """Seeded mixture-of-topics generator for one domain.

    Sequences are a BOS token followed by tokens drawn i.i.d. from the
    emission distribution of a latent topic sampled from ``topic_mixture``.
    ``overlap_fraction`` records what fraction of ``vocab_subset`` is shared
    with the stream's common pool; it is metadata for analysis, not used
    during sampling.
    """

    domain_id: str
    vocab_subset: tuple[int, ...]
    topic_mixture: tuple[float, ...]
    topic_emissions: tuple[tuple[float, ...], ...]
    overlap_fraction: float
    seed: int

    def __post_init__(self):
        if len(self.vocab_subset) == 0:
            raise ValueError("vocab_subset must be nonempty")
        if any(t < NUM_SPECIAL for t in self.vocab_subset):
            raise ValueError(f"vocab_subset ids must be >= {NUM_SPECIAL} (special ids are reserved)")
        if abs(sum(self.topic_mixture) - 1.0) > 1e-9:
            raise ValueError("topic_mixture must sum to 1")
        if len(self.topic_emissions) != len(self.topic_mixture):
            raise ValueError("one emission distribution per topic required")
        for row in self.topic_emissions:
            if len(row) != len(self.vocab_subset):
                raise ValueError("emission distribution length must match vocab_subset")
            if abs(sum(row) - 1.0) > 1e-9:
                raise ValueError("each emission distribution must sum to 1")

    @property
    def n_topics(self) -> int:
        return len(self.topic_mixture)


@dataclass(frozen=True)
class DomainCorpus:
    """Train/heldout token sequences for one domain.

    ``train_topics``/``heldout_topics`` carry the latent topic of each
    sequence when the corpus is generator-backed (None for external or
    merged corpora). Train and heldout come from disjoint index ranges of
    one generation pass, so the splits never share a draw.
    """

    domain_id: str
    train: tuple[TokenSequence, ...]
    heldout: tuple[TokenSequence, ...]
    generator: GeneratorSpec | None = None
    train_topics: tuple[int, ...] | None = None
    heldout_topics: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.train_topics is not None and len(self.train_topics) != len(self.train):
            raise ValueError("train_topics must align with train")
        if self.heldout_topics is not None and len(self.heldout_topics) != len(self.heldout):
            raise ValueError("heldout_topics must align with heldout")


@dataclass(frozen=True)
class DomainStream:
    """Ordered sequence of domain corpora presented to the model."""

    domains: tuple[DomainCorpus, ...]
    ordering_kind: str

    def __post_init__(self):
        if len(self.domains) < 2:
            raise ValueError("a stream needs at least 2 domains")
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate domain_ids in stream: {ids}")
        if self.ordering_kind not in ORDERING_KINDS:
            raise ValueError(f"ordering_kind must be one of {ORDERING_KINDS}")

    def __len__(self) -> int:
        return len(self.domains)


@dataclass(frozen=True)
class MaskedBatch:
    """MLM-corrupted batch.

    ``target_ids`` holds the original token where ``mask_positions`` is True
    and TARGET_SENTINEL elsewhere. ``padding_mask`` is True at real (non-pad)
    positions.
    """

    input_ids: np.ndarray    # int64 [batch, len]
    target_ids: np.ndarray   # int64 [batch, len]
    mask_positions: np.ndarray  # bool [batch, len]
    padding_mask: np.ndarray    # bool [batch, len]

    def __post_init__(self):
        if not ((self.target_ids != TARGET_SENTINEL) == self.mask_positions).all():
            raise ValueError("targets must be defined exactly at masked positions")

    @property
    def n_masked(self) -> int:
        return int(self.mask_positions.sum())


TARGET_SENTINEL = -100


def one_topic_spec(domain_id: str, token_probs: dict[int, float], seed: int) -> GeneratorSpec:
    """Single-topic generator emitting from an explicit token->prob map."""
    vocab = tuple(sorted(token_probs))
    probs = tuple(token_probs[t] for t in vocab)
    return GeneratorSpec(domain_id, vocab, (1.0,), (probs,), overlap_fraction=0.0, seed=seed)


def synth_domain_corpus(
    spec: GeneratorSpec,
    n_train: int,
    n_heldout: int | None = None,
    max_len: int = 64,
) -> DomainCorpus:
    """Generate a domain corpus from a topic-mixture generator.

    Deterministic given ``spec.seed``. ``n_heldout`` defaults to 1/50 of
    the train size. Sequence layout: BOS followed by a uniformly-drawn
    number of content tokens so the total length is in [2, max_len].
    """
    if n_heldout is None:
        n_heldout = max(1, n_train // 50)
    if n_train < 1 or n_heldout < 1:
        raise ValueError("n_train and n_heldout must be >= 1")
    if max_len < 2:
        raise ValueError("max_len must be >= 2 (BOS plus at least one token)")

    rng = np.random.default_rng(spec.seed)
    n_total = n_train + n_heldout
    vocab = np.asarray(spec.vocab_subset, dtype=np.int64)
    mixture = np.asarray(spec.topic_mixture, dtype=np.float64)
    emissions = np.asarray(spec.topic_emissions, dtype=np.float64)

    topics = rng.choice(len(mixture), size=n_total, p=mixture)
    min_content = max(1, (max_len - 1) // 2)
    lengths = rng.integers(min_content, max_len, size=n_total)  # content length, total in [2, max_len]

    seqs: list[TokenSequence] = []
    for topic, length in zip(topics, lengths):
        content = rng.choice(vocab, size=int(length), p=emissions[topic])
        seqs.append((BOS_ID, *content.tolist()))

    return DomainCorpus(
        domain_id=spec.domain_id,
        train=tuple(seqs[:n_train]),
        heldout=tuple(seqs[n_train:]),
        generator=spec,
        train_topics=tuple(int(t) for t in topics[:n_train]),
        heldout_topics=tuple(int(t) for t in topics[n_train:]),
    )


def sample_labeled_sequences(
    spec: GeneratorSpec,
    topic: int,
    n: int,
    max_len: int,
    seed: int,
) -> list[TokenSequence]:
    """Sample sequences conditioned on one latent topic (for labeled tasks)."""
    if not 0 <= topic < spec.n_topics:
        raise ValueError(f"topic {topic} out of range for {spec.n_topics}-topic generator")
    rng = np.random.default_rng(seed)
    vocab = np.asarray(spec.vocab_subset, dtype=np.int64)
    emission = np.asarray(spec.topic_emissions[topic], dtype=np.float64)
    min_content = max(1, (max_len - 1) // 2)
    lengths = rng.integers(min_content, max_len, size=n)
    return [(BOS_ID, *rng.choice(vocab, size=int(k), p=emission).tolist()) for k in lengths]


def build_stream(corpora: Sequence[DomainCorpus], ordering_kind: str) -> DomainStream:
    """Assemble corpora into a stream, preserving the given order."""
    return DomainStream(domains=tuple(corpora), ordering_kind=ordering_kind)


def mask_batch(
    batch: Sequence[TokenSequence],
    mask_prob: float,
    seed: int,
    vocab_size: int,
) -> MaskedBatch:
    """Apply BERT-style MLM corruption to a batch of sequences.

    Each content position (not BOS, not padding) is selected with
    probability ``mask_prob``; of the selected positions 80% become the
    mask token, 10% a random content token, 10% stay unchanged.
    Deterministic given the seed.
    """
    if not 0.0 < mask_prob < 1.0:
        raise ValueError("mask_prob must be in (0, 1)")
    if len(batch) == 0:
        raise ValueError("empty batch")

    rng = np.random.default_rng(seed)
    max_len = max(len(s) for s in batch)
    n = len(batch)

    input_ids = np.full((n, max_len), PAD_ID, dtype=np.int64)
    padding_mask = np.zeros((n, max_len), dtype=bool)
    for i, seq in enumerate(batch):
        input_ids[i, : len(seq)] = seq
        padding_mask[i, : len(seq)] = True

    maskable = padding_mask & (input_ids >= NUM_SPECIAL)
    selected = maskable & (rng.random((n, max_len)) < mask_prob)

    target_ids = np.full((n, max_len), TARGET_SENTINEL, dtype=np.int64)
    target_ids[selected] = input_ids[selected]

    roll = rng.random((n, max_len))
    to_mask = selected & (roll < 0.8)
    to_random = selected & (roll >= 0.8) & (roll < 0.9)
    input_ids[to_mask] = MASK_ID
    n_random = int(to_random.sum())
    if n_random:
        input_ids[to_random] = rng.integers(NUM_SPECIAL, vocab_size, size=n_random)

    return MaskedBatch(input_ids, target_ids, selected, padding_mask)


def shuffle_union(stream: DomainStream, seed: int) -> DomainCorpus:
    """Merge all domains' train splits into one seeded shuffle (MTL corpus)."""
    pooled: list[TokenSequence] = []
    for d in stream.domains:
        pooled.extend(d.train)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(pooled))
    train = tuple(pooled[i] for i in perm)
    union_id = "union(" + "+".join(d.domain_id for d in stream.domains) + ")"
    # Heldout evaluation stays per-domain; the merged corpus has none of its own.
    return DomainCorpus(domain_id=union_id, train=train, heldout=())


def unigram_frequencies(corpus: DomainCorpus) -> np.ndarray:
    """Content-token unigram frequency vector over the train split.

    Special ids (pad/bos/mask) are excluded so the vector reflects the
    generator's emission marginal. Indexed by raw token id.
    """
    counts: dict[int, int] = {}
    total = 0
    for seq in corpus.train:
        for t in seq:
            if t >= NUM_SPECIAL:
                counts[t] = counts.get(t, 0) + 1
                total += 1
    if total == 0:
        raise ValueError(f"corpus {corpus.domain_id!r} has no content tokens")
    size = max(counts) + 1
    freq = np.zeros(size, dtype=np.float64)
    for t, c in counts.items():
        freq[t] = c / total
    return freq


def vocab_distance(a: DomainCorpus, b: DomainCorpus) -> float:
    """Cosine distance (1 - cosine similarity) of unigram frequency vectors."""
    if not a.train or not b.train:
        raise ValueError("vocab_distance requires nonempty corpora")
    fa = unigram_frequencies(a)
    fb = unigram_frequencies(b)
    size = max(len(fa), len(fb))
    fa = np.pad(fa, (0, size - len(fa)))
    fb = np.pad(fb, (0, size - len(fb)))
    cos = float(fa @ fb) / (float(np.linalg.norm(fa)) * float(np.linalg.norm(fb)))
    return 1.0 - cos


def dirichlet_topic_specs(
    domain_ids: Sequence[str],
    vocab_size: int,
    subset_size: int,
    n_topics: int,
    overlap_fraction: float,
    seed: int,
    dirichlet_alpha: float = 0.3,
) -> list[GeneratorSpec]:
    """Generator specs for a domain-incremental stream.

    Each domain's vocabulary is ``subset_size`` tokens: a shared slice of
    a common pool (overlap_fraction of the subset) plus private tokens no
    other domain uses. Topics get independent Dirichlet emissions, so
    topics are separable and domains with low overlap are far apart in
    vocabulary distribution.
    """
    if not 0.0 <= overlap_fraction <= 1.0:
        raise ValueError("overlap_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    pool = np.arange(NUM_SPECIAL, vocab_size)
    n_shared = int(round(overlap_fraction * subset_size))
    n_private = subset_size - n_shared
    needed = n_shared + n_private * len(domain_ids)
    if needed > len(pool):
        raise ValueError(
            f"vocab_size {vocab_size} too small: need {needed} content ids "
            f"for {len(domain_ids)} domains of subset_size {subset_size}"
        )
    drawn = rng.choice(pool, size=needed, replace=False)
    shared = drawn[:n_shared]
    specs = []
    for i, domain_id in enumerate(domain_ids):
        private = drawn[n_shared + i * n_private : n_shared + (i + 1) * n_private]
        subset = np.sort(np.concatenate([shared, private]))
        emissions = rng.dirichlet([dirichlet_alpha] * subset_size, size=n_topics)
        specs.append(
            GeneratorSpec(
                domain_id=domain_id,
                vocab_subset=tuple(int(t) for t in subset),
                topic_mixture=tuple([1.0 / n_topics] * n_topics),
                topic_emissions=tuple(tuple(row) for row in emissions),
                overlap_fraction=overlap_fraction,
                seed=int(rng.integers(0, 2**31 - 1)),
            )
        )
    return specs


def drifting_topic_specs(
    domain_ids: Sequence[str],
    vocab_size: int,
    subset_size: int,
    n_topics: int,
    drift: float,
    seed: int,
    dirichlet_alpha: float = 0.3,
) -> list[GeneratorSpec]:
    """Generator specs for a chronological stream.

    All domains share one vocabulary and one topic identity space; each
    step blends the previous emissions with a fresh Dirichlet draw
    (``drift`` is the blend weight), so label semantics stay aligned while
    the token distributions move gradually. drift=0 repeats the same
    distributions at every step.
    """
    if not 0.0 <= drift <= 1.0:
        raise ValueError("drift must be in [0, 1]")
    rng = np.random.default_rng(seed)
    pool = np.arange(NUM_SPECIAL, vocab_size)
    if subset_size > len(pool):
        raise ValueError("subset_size exceeds available content ids")
    subset = np.sort(rng.choice(pool, size=subset_size, replace=False))
    emissions = rng.dirichlet([dirichlet_alpha] * subset_size, size=n_topics)
    specs = []
    for domain_id in domain_ids:
        specs.append(
            GeneratorSpec(
                domain_id=domain_id,
                vocab_subset=tuple(int(t) for t in subset),
                topic_mixture=tuple([1.0 / n_topics] * n_topics),
                topic_emissions=tuple(tuple(row) for row in emissions),
                overlap_fraction=1.0,
                seed=int(rng.integers(0, 2**31 - 1)),
            )
        )
        fresh = rng.dirichlet([dirichlet_alpha] * subset_size, size=n_topics)
        if drift > 0:
            emissions = (1.0 - drift) * emissions + drift * fresh
            emissions = emissions / emissions.sum(axis=1, keepdims=True)
    return specs


def synth_stream(
    specs: Sequence[GeneratorSpec],
    n_train: int,
    ordering_kind: str,
    n_heldout: int | None = None,
    max_len: int = 64,
) -> DomainStream:
    """Materialize a stream from generator specs."""
    corpora = [synth_domain_corpus(s, n_train, n_heldout, max_len) for s in specs]
    return build_stream(corpora, ordering_kind)


# ---------------------------------------------------------------------------
# Serialization: one sequence per line (space-separated ids) plus a JSON
# sidecar with the generator spec and split sizes.
# ---------------------------------------------------------------------------

def _write_split(path: Path, seqs: Iterable[TokenSequence]) -> None:
    with open(path, "w") as fh:
        for seq in seqs:
            fh.write(" ".join(str(t) for t in seq) + "\n")


def _read_split(path: Path) -> tuple[TokenSequence, ...]:
    seqs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                seqs.append(tuple(int(t) for t in line.split()))
    return tuple(seqs)


def save_corpus(corpus: DomainCorpus, out_dir: str | Path) -> Path:
    """Write a corpus as <id>.train.txt / <id>.heldout.txt / <id>.meta.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = corpus.domain_id
    _write_split(out_dir / f"{stem}.train.txt", corpus.train)
    _write_split(out_dir / f"{stem}.heldout.txt", corpus.heldout)
    meta = {
        "format": "driftlm-corpus-v1",
        "domain_id": corpus.domain_id,
        "n_train": len(corpus.train),
        "n_heldout": len(corpus.heldout),
        "generator": None,
        "train_topics": list(corpus.train_topics) if corpus.train_topics else None,
        "heldout_topics": list(corpus.heldout_topics) if corpus.heldout_topics else None,
    }
    if corpus.generator is not None:
        g = corpus.generator
        meta["generator"] = {
            "domain_id": g.domain_id,
            "vocab_subset": list(g.vocab_subset),
            "topic_mixture": list(g.topic_mixture),
            "topic_emissions": [list(r) for r in g.topic_emissions],
            "overlap_fraction": g.overlap_fraction,
            "seed": g.seed,
        }
    with open(out_dir / f"{stem}.meta.json", "w") as fh:
        json.dump(meta, fh)
    return out_dir / f"{stem}.meta.json"


def load_corpus(out_dir: str | Path, domain_id: str) -> DomainCorpus:
    out_dir = Path(out_dir)
    with open(out_dir / f"{domain_id}.meta.json") as fh:
        meta = json.load(fh)
    if meta.get("format") != "driftlm-corpus-v1":
        raise ValueError(f"unrecognized corpus metadata format in {out_dir}")
    generator = None
    if meta["generator"] is not None:
        g = meta["generator"]
        generator = GeneratorSpec(
            domain_id=g["domain_id"],
            vocab_subset=tuple(g["vocab_subset"]),
            topic_mixture=tuple(g["topic_mixture"]),
            topic_emissions=tuple(tuple(r) for r in g["topic_emissions"]),
            overlap_fraction=g["overlap_fraction"],
            seed=g["seed"],
        )
    train = _read_split(out_dir / f"{domain_id}.train.txt")
    heldout = _read_split(out_dir / f"{domain_id}.heldout.txt")
    if len(train) != meta["n_train"] or len(heldout) != meta["n_heldout"]:
        raise ValueError(f"split sizes for {domain_id!r} do not match metadata")
    return DomainCorpus(
        domain_id=meta["domain_id"],
        train=train,
        heldout=heldout,
        generator=generator,
        train_topics=tuple(meta["train_topics"]) if meta["train_topics"] else None,
        heldout_topics=tuple(meta["heldout_topics"]) if meta["heldout_topics"] else None,
    )
