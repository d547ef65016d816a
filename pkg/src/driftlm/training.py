"""Lifelong pretraining driver.

One model is updated over a stream of domain corpora under a configured
algorithm: plain sequential training, per-domain independent models,
offline training on the shuffled union, experience replay, an online
quadratic parameter-drift penalty, per-domain adapters or top-layer
expansion, or one of the teacher-student distillation variants.

Every batch-level model pass is tallied in a cost ledger (forward and
backward counts, per domain) and checked against closed-form expressions;
a data-access log records every raw-corpus read so the storage constraint
(after domain t starts, earlier domains are reachable only through the
replay memory) is checkable, not just assumed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import DomainCorpus, DomainStream, MaskedBatch, mask_batch, shuffle_union
from .distill import (
    DistillConfig,
    combine_losses,
    contrastive_kd_loss,
    logit_kd_loss,
    rep_kd_loss,
    seed_kd_loss,
    similarity_matrix,
    simcse_loss_from_reps,
)
from .memory import ReplayMemory, RepresentationQueue, rebalance_after_domain, sample_memory
from .model import (
    Checkpoint,
    MlmEncoder,
    ModelConfig,
    batch_to_tensors,
    init_model,
    load_checkpoint,
    save_checkpoint,
    sentence_representation,
)

log = logging.getLogger(__name__)

ALGORITHMS = (
    "sequential",
    "task_specific",
    "mtl",
    "er",
    "ewc",
    "adapter",
    "layer_expand",
    "logit_kd",
    "rep_kd",
    "contrast_kd",
    "seed_kd",
    "seed_logit_kd",
)

KD_KIND_BY_ALGORITHM = {
    "logit_kd": "logit",
    "rep_kd": "rep",
    "contrast_kd": "contrastive",
    "seed_kd": "seed",
    "seed_logit_kd": "seed_logit",
}

# Algorithms that maintain and periodically replay the memory.
REPLAY_ALGORITHMS = frozenset({"er", *KD_KIND_BY_ALGORITHM})
# Distillation flavors that train the in-batch contrastive auxiliary by default.
SIMCSE_DEFAULT_ALGORITHMS = frozenset({"contrast_kd", "seed_kd", "seed_logit_kd"})


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "sequential"
    steps_first_domain: int = 800
    steps_later_domain: int = 400
    effective_batch_size: int = 64
    micro_batch_size: int = 64
    lr_init: float = 5e-4
    weight_decay: float = 0.01
    mask_prob: float = 0.15
    replay_every: int = 10       # k: one memory batch every k stream steps
    distill_every: int = 1       # k': distill on stream batches every k' steps
    steps_multiplier: float = 1.0  # the controlled "1.2x steps" baseline
    memory_capacity: int = 2048
    queue_capacity: int = 1024
    simcse: bool | None = None   # None = on for contrastive/queue distillation
    ewc_lambda: float = 100.0
    ewc_gamma: float = 0.99
    ewc_fisher_batches: int = 32
    distill: DistillConfig | None = None
    seed: int = 0
    reference_mode: bool = True  # single-threaded, bitwise-reproducible runs

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.replay_every < 1 or self.distill_every < 1:
            raise ValueError("replay_every and distill_every must be >= 1")
        if self.effective_batch_size % self.micro_batch_size != 0:
            raise ValueError("effective_batch_size must be divisible by micro_batch_size")
        if self.steps_first_domain < 1 or self.steps_later_domain < 1:
            raise ValueError("step counts must be >= 1")
        if self.steps_multiplier <= 0:
            raise ValueError("steps_multiplier must be positive")
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError("mask_prob must be in (0, 1)")

    @property
    def kd_kind(self) -> str | None:
        return KD_KIND_BY_ALGORITHM.get(self.algorithm)

    @property
    def simcse_active(self) -> bool:
        if self.simcse is not None:
            return self.simcse
        return self.algorithm in SIMCSE_DEFAULT_ALGORITHMS

    def resolved_distill(self) -> DistillConfig | None:
        if self.kd_kind is None:
            return None
        if self.distill is not None:
            if self.distill.kd_kind != self.kd_kind:
                raise ValueError("distill.kd_kind does not match algorithm")
            return self.distill
        return DistillConfig.for_kind(self.kd_kind)

    def steps_for_domain(self, t: int) -> int:
        base = self.steps_first_domain if t == 1 else self.steps_later_domain
        return int(round(base * self.steps_multiplier))


# ---------------------------------------------------------------------------
# Cost ledger and closed-form accounting
# ---------------------------------------------------------------------------

@dataclass
class CostLedger:
    """Exact integer counts of batch-level model passes.

    ``forward``/``backward`` cover training passes (stream, replay,
    distillation targets, contrastive second views); boundary work that is
    not part of the per-step training cost (Fisher estimation) lands in the
    ``aux_*`` counters. Counts are in units of effective batches: splitting
    a batch into micro-batches does not change them.
    """

    forward: dict[str, int] = field(default_factory=dict)
    backward: dict[str, int] = field(default_factory=dict)
    aux_forward: dict[str, int] = field(default_factory=dict)
    aux_backward: dict[str, int] = field(default_factory=dict)
    domain_order: list[str] = field(default_factory=list)

    def open_domain(self, domain_id: str) -> None:
        if domain_id not in self.domain_order:
            self.domain_order.append(domain_id)
        for counter in (self.forward, self.backward, self.aux_forward, self.aux_backward):
            counter.setdefault(domain_id, 0)

    def add(self, domain_id: str, forward: int = 0, backward: int = 0, aux: bool = False) -> None:
        fwd, bwd = (self.aux_forward, self.aux_backward) if aux else (self.forward, self.backward)
        fwd[domain_id] = fwd.get(domain_id, 0) + forward
        bwd[domain_id] = bwd.get(domain_id, 0) + backward

    def totals(self, domain_ids: Iterable[str] | None = None) -> tuple[int, int]:
        ids = list(domain_ids) if domain_ids is not None else self.domain_order
        return (sum(self.forward.get(d, 0) for d in ids), sum(self.backward.get(d, 0) for d in ids))

    def totals_after_first(self) -> tuple[int, int]:
        return self.totals(self.domain_order[1:])

    def to_dict(self) -> dict:
        fwd, bwd = self.totals()
        return {
            "forward_total": fwd,
            "backward_total": bwd,
            "total": fwd + bwd,
            "per_domain": {
                d: {
                    "forward": self.forward.get(d, 0),
                    "backward": self.backward.get(d, 0),
                    "aux_forward": self.aux_forward.get(d, 0),
                    "aux_backward": self.aux_backward.get(d, 0),
                }
                for d in self.domain_order
            },
            "domain_order": list(self.domain_order),
        }


@dataclass(frozen=True)
class CostCounts:
    forward: int
    backward: int

    @property
    def total(self) -> int:
        return self.forward + self.backward


def cost_closed_form(
    algorithm: str,
    k: int,
    k_prime: int,
    b: int,
    simcse: bool | None = None,
    steps_multiplier: float = 1.0,
) -> CostCounts:
    """Closed-form forward/backward counts over b stream batches.

    Exact integer arithmetic: fractional terms appear as floor(b/k) and
    floor(b/k'), which coincide with the real-valued expressions
    C_f=(1+2/k+1/k')b, C_b=(1+1/k)b whenever k and k' divide b. The
    contrastive auxiliary adds one forward and one backward per trained
    batch. ``b`` counts post-first-domain stream steps; the first domain
    runs plain MLM for every algorithm.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if b <= 0:
        raise ValueError("b must be positive")
    if k < 1 or k_prime < 1:
        raise ValueError("k and k' must be >= 1")
    base = int(round(b * steps_multiplier))
    if algorithm in ("sequential", "task_specific", "mtl", "adapter", "layer_expand", "ewc"):
        return CostCounts(base, base)
    if algorithm == "er":
        per = base + base // k
        return CostCounts(per, per)
    # distillation algorithms
    if simcse is None:
        simcse = algorithm in SIMCSE_DEFAULT_ALGORITHMS
    trained_batches = base + base // k
    fwd = base + base // k_prime + 2 * (base // k)
    bwd = trained_batches
    if simcse:
        fwd += trained_batches
        bwd += trained_batches
    return CostCounts(fwd, bwd)


@dataclass(frozen=True)
class LedgerCheck:
    ok: bool
    expected: CostCounts
    actual: CostCounts
    report: str

    def __bool__(self) -> bool:
        return self.ok


def verify_ledger(ledger: CostLedger, expected: CostCounts, after_first: bool = True) -> LedgerCheck:
    """Compare instrumented counts against a closed form, integer-exact."""
    fwd, bwd = ledger.totals_after_first() if after_first else ledger.totals()
    actual = CostCounts(fwd, bwd)
    ok = actual == expected
    if ok:
        report = f"ledger matches closed form: forward={fwd} backward={bwd} total={fwd + bwd}"
    else:
        lines = [
            "ledger mismatch:",
            f"  forward:  expected {expected.forward}, instrumented {fwd} (diff {fwd - expected.forward:+d})",
            f"  backward: expected {expected.backward}, instrumented {bwd} (diff {bwd - expected.backward:+d})",
            f"  per-domain: {ledger.to_dict()['per_domain']}",
        ]
        report = "\n".join(lines)
    return LedgerCheck(ok, expected, actual, report)


# ---------------------------------------------------------------------------
# Data-access logging (storage-constraint audit)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AccessRecord:
    domain_id: str
    split: str        # "train" | "heldout"
    stage: str        # "pretrain" | "memory_populate" | "fisher" | "finetune" | "eval"
    current_domain: str | None  # domain being trained when the read happened


class DataAccessLog:
    def __init__(self):
        self.records: list[AccessRecord] = []

    def log(self, domain_id: str, split: str, stage: str, current_domain: str | None) -> None:
        self.records.append(AccessRecord(domain_id, split, stage, current_domain))

    def pretraining_violations(self) -> list[AccessRecord]:
        """Raw train-split reads of a domain other than the one being trained."""
        return [
            r
            for r in self.records
            if r.stage in ("pretrain", "fisher", "memory_populate")
            and r.split == "train"
            and r.domain_id != r.current_domain
        ]

    def finetuning_violations(self) -> list[AccessRecord]:
        """Any pretraining-corpus read attributed to the fine-tuning stage."""
        return [r for r in self.records if r.stage == "finetune"]


# ---------------------------------------------------------------------------
# Online EWC
# ---------------------------------------------------------------------------

@dataclass
class FisherState:
    """Running diagonal Fisher estimate plus the anchor parameters."""

    gamma: float = 0.99
    lam: float = 100.0
    fisher: dict[str, torch.Tensor] | None = None
    anchor: dict[str, torch.Tensor] | None = None


def ewc_accumulate_fisher(model: MlmEncoder, batch: MaskedBatch, state: FisherState) -> FisherState:
    """One decayed-Fisher update from the squared MLM gradient on a batch."""
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    input_ids, target_ids, mask_positions, padding_mask = batch_to_tensors(batch)
    hidden = model.encode(input_ids, padding_mask)
    logits = model.logits(hidden)
    loss = F.cross_entropy(logits[mask_positions], target_ids[mask_positions])
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    if state.fisher is None:
        state.fisher = {n: torch.zeros_like(p) for n, p in named}
    g, one_minus = state.gamma, 1.0 - state.gamma
    for (name, _), grad in zip(named, grads):
        sq = torch.zeros_like(state.fisher[name]) if grad is None else grad.detach() ** 2
        state.fisher[name] = g * state.fisher[name] + one_minus * sq
    return state


def ewc_set_anchor(model: MlmEncoder, state: FisherState) -> None:
    state.anchor = {n: p.detach().clone() for n, p in model.named_parameters() if p.requires_grad}


def ewc_penalty(model: MlmEncoder, state: FisherState) -> torch.Tensor:
    """Quadratic drift penalty (lam/2) * sum_i F_i (theta_i - anchor_i)^2."""
    if state.anchor is None or state.fisher is None:
        raise ValueError("EWC penalty requested before any anchor was set")
    total = None
    for name, p in model.named_parameters():
        if name not in state.anchor:
            continue
        term = (state.fisher[name] * (p - state.anchor[name]) ** 2).sum()
        total = term if total is None else total + term
    return 0.5 * state.lam * total


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainContext:
    """Cross-domain state threaded through train_domain calls."""

    memory: ReplayMemory | None = None
    teacher: MlmEncoder | None = None
    fisher: FisherState | None = None
    queue: RepresentationQueue | None = None
    ledger: CostLedger = field(default_factory=CostLedger)
    access_log: DataAccessLog = field(default_factory=DataAccessLog)


def _slice_batch(mb: MaskedBatch, lo: int, hi: int) -> MaskedBatch:
    return MaskedBatch(
        input_ids=mb.input_ids[lo:hi],
        target_ids=mb.target_ids[lo:hi],
        mask_positions=mb.mask_positions[lo:hi],
        padding_mask=mb.padding_mask[lo:hi],
    )


def _micro_slices(mb: MaskedBatch, micro: int) -> list[MaskedBatch]:
    n = mb.input_ids.shape[0]
    if micro >= n:
        return [mb]
    return [_slice_batch(mb, lo, min(lo + micro, n)) for lo in range(0, n, micro)]


def _mlm_forward(model: MlmEncoder, mb: MaskedBatch):
    """Single encoder pass returning hidden states, logits, and the MLM loss."""
    input_ids, target_ids, mask_positions, padding_mask = batch_to_tensors(mb)
    hidden = model.encode(input_ids, padding_mask)
    logits = model.logits(hidden)
    if mb.n_masked == 0:
        log.warning("batch with zero masked positions; MLM loss defined as 0")
        mlm = torch.zeros((), dtype=logits.dtype)
    else:
        mlm = F.cross_entropy(logits[mask_positions], target_ids[mask_positions])
    return hidden, logits, mlm, mask_positions, padding_mask


def _kd_terms(
    model: MlmEncoder,
    teacher: MlmEncoder,
    mb: MaskedBatch,
    hidden: torch.Tensor,
    logits: torch.Tensor,
    mask_positions: torch.Tensor,
    padding_mask: torch.Tensor,
    kd: DistillConfig,
    queue: RepresentationQueue | None,
    push_queue: bool,
):
    """Distillation loss for one (micro-)batch; one teacher pass.

    ``extra_kd`` carries the (loss, weight) pair of the queue-similarity
    term when it rides along with logit distillation. The queue caches
    teacher representations of current-domain stream batches only
    (``push_queue`` is False for memory batches).
    """
    input_ids = torch.from_numpy(mb.input_ids)
    pad = torch.from_numpy(mb.padding_mask)
    with torch.no_grad():
        t_hidden = teacher.encode(input_ids, pad)
        t_logits = teacher.logits(t_hidden) if kd.kd_kind in ("logit", "seed_logit") else None

    extra = None
    if kd.kd_kind == "logit":
        positions = _logit_positions(kd, mask_positions, padding_mask)
        kd_loss = logit_kd_loss(logits, t_logits, positions, kd.kl_direction)
    elif kd.kd_kind == "rep":
        kd_loss = rep_kd_loss(hidden, t_hidden, padding_mask)
    elif kd.kd_kind == "contrastive":
        s_reps = F.normalize(hidden[:, 0, :], dim=-1)
        t_reps = F.normalize(t_hidden[:, 0, :], dim=-1)
        b_teacher = similarity_matrix(t_reps, kd.tau_teacher)
        b_student = similarity_matrix(s_reps, kd.tau_student)
        kd_loss = contrastive_kd_loss(b_teacher, b_student)
    elif kd.kd_kind in ("seed", "seed_logit"):
        s_reps = F.normalize(hidden[:, 0, :], dim=-1)
        t_reps = F.normalize(t_hidden[:, 0, :], dim=-1)
        if push_queue:
            queue.push(t_reps)
        snapshot = queue.snapshot()
        seed_loss = seed_kd_loss(s_reps, t_reps, snapshot, kd.tau_teacher, kd.tau_student)
        if kd.kd_kind == "seed":
            kd_loss = seed_loss
        else:
            positions = _logit_positions(kd, mask_positions, padding_mask)
            kd_loss = logit_kd_loss(logits, t_logits, positions, kd.kl_direction)
            extra = (seed_loss, kd.alpha_secondary)
    else:
        raise ValueError(f"unhandled kd kind {kd.kd_kind!r}")
    return kd_loss, extra


def _logit_positions(kd: DistillConfig, mask_positions: torch.Tensor, padding_mask: torch.Tensor):
    if kd.logit_positions == "all":
        return padding_mask
    # a batch can end up with zero masked positions; fall back to all real
    # positions so the distillation target stays defined
    return mask_positions if bool(mask_positions.any()) else padding_mask


def _train_batch(
    model: MlmEncoder,
    mb: MaskedBatch,
    config: TrainConfig,
    ctx: TrainContext,
    domain_id: str,
    optimizer: torch.optim.Optimizer,
    distill_now: bool,
    simcse_now: bool,
    kd: DistillConfig | None,
    push_queue: bool = True,
) -> dict:
    """One optimizer update on one effective batch; ledger-instrumented.

    Micro-batches accumulate gradients scaled by their share of the batch.
    The distillation target pass, the joint backward, and the optional
    contrastive second view each count once per effective batch.
    """
    ctx.ledger.add(domain_id, forward=1)
    if distill_now:
        ctx.ledger.add(domain_id, forward=1)
    ctx.ledger.add(domain_id, backward=1)
    if simcse_now:
        ctx.ledger.add(domain_id, forward=1, backward=1)

    optimizer.zero_grad(set_to_none=True)
    total = mb.input_ids.shape[0]
    stats = {"mlm": 0.0, "kd": None, "simcse": None}
    for slice_ in _micro_slices(mb, config.micro_batch_size):
        share = slice_.input_ids.shape[0] / total
        hidden, logits, mlm, mask_positions, padding_mask = _mlm_forward(model, slice_)
        kd_loss = extra = None
        if distill_now:
            kd_loss, extra = _kd_terms(
                model, ctx.teacher, slice_, hidden, logits, mask_positions, padding_mask,
                kd, ctx.queue, push_queue,
            )
        joint = combine_losses(mlm, kd_loss, kd.alpha if kd_loss is not None else 0.0, extra_kd=extra)
        if config.algorithm == "ewc" and ctx.fisher is not None and ctx.fisher.anchor is not None:
            joint = joint + ewc_penalty(model, ctx.fisher)
        if joint.requires_grad:  # a zero-mask batch without KD has a constant loss
            (share * joint).backward(retain_graph=simcse_now)
        stats["mlm"] += share * float(mlm.detach())
        if kd_loss is not None:
            stats["kd"] = (stats["kd"] or 0.0) + share * float(kd_loss.detach())
        if simcse_now:
            anchors = sentence_representation(model, slice_, hidden=hidden)
            positives = sentence_representation(model, slice_)
            aux = simcse_loss_from_reps(anchors, positives, (kd or DistillConfig()).tau_simcse)
            (share * aux).backward()
            stats["simcse"] = (stats["simcse"] or 0.0) + share * float(aux.detach())
    optimizer.step()
    model.step_counter += 1
    return stats


def train_domain(
    model: MlmEncoder,
    domain: DomainCorpus,
    config: TrainConfig,
    t: int,
    ctx: TrainContext,
    schedule_t: int | None = None,
) -> list[dict]:
    """Train in place on one domain; returns one log record per stream step.

    Scheduling: linear LR decay from lr_init to ~0 over the domain's steps;
    a memory batch every ``replay_every`` stream steps (domains >= 2 of
    replay-capable algorithms); distillation on stream batches every
    ``distill_every`` steps and on every replay batch. Data is visited
    single-epoch: a seeded permutation of the train split, each index used
    at most once.
    """
    steps = config.steps_for_domain(schedule_t if schedule_t is not None else t)
    needed = steps * config.effective_batch_size
    if len(domain.train) < needed:
        raise ValueError(
            f"domain {domain.domain_id!r} train split has {len(domain.train)} sequences; "
            f"{needed} needed for {steps} single-epoch steps at batch {config.effective_batch_size}"
        )

    kd = config.resolved_distill()
    distill_here = kd is not None and t >= 2
    replay_here = config.algorithm in REPLAY_ALGORITHMS and t >= 2
    simcse_here = config.simcse_active and distill_here
    if distill_here and ctx.teacher is None:
        raise ValueError("distillation scheduled but no teacher in context")
    if replay_here and (ctx.memory is None or len(ctx.memory) == 0):
        raise ValueError("replay scheduled but the memory is empty")
    if distill_here and config.kd_kind in ("seed", "seed_logit") and replay_here:
        if config.distill_every > config.replay_every:
            raise ValueError(
                "queue distillation needs distill_every <= replay_every so the "
                "queue is populated before the first memory batch"
            )

    seeds = np.random.SeedSequence([config.seed, t, 0xD0]).generate_state(4)
    torch.manual_seed(int(seeds[0]))
    perm = np.random.default_rng(int(seeds[1])).permutation(len(domain.train))
    vocab_size = model.config.vocab_size

    ctx.ledger.open_domain(domain.domain_id)
    optimizer = torch.optim.AdamW(
        model.trainable_parameters(),
        lr=config.lr_init,
        betas=(0.9, 0.999),
        weight_decay=config.weight_decay,
    )

    model.train()
    if ctx.teacher is not None:
        ctx.teacher.eval()

    records = []
    batch_size = config.effective_batch_size
    for s in range(1, steps + 1):
        lr = config.lr_init * (1.0 - (s - 1) / steps)
        for group in optimizer.param_groups:
            group["lr"] = lr

        idx = perm[(s - 1) * batch_size : s * batch_size]
        seqs = [domain.train[i] for i in idx]
        ctx.access_log.log(domain.domain_id, "train", "pretrain", domain.domain_id)
        mb = mask_batch(seqs, config.mask_prob, (int(seeds[2]) + s) % 2**31, vocab_size)

        distill_now = distill_here and s % config.distill_every == 0
        stats = _train_batch(
            model, mb, config, ctx, domain.domain_id, optimizer, distill_now, simcse_here, kd
        )
        record = {"domain": domain.domain_id, "t": t, "step": s, "lr": lr, **stats, "replay": None}

        if replay_here and s % config.replay_every == 0:
            replay_seed = (int(seeds[3]) + s) % 2**31
            seqs = sample_memory(ctx.memory, batch_size, replay_seed)
            rb = mask_batch(seqs, config.mask_prob, replay_seed + 1, vocab_size)
            replay_stats = _train_batch(
                model, rb, config, ctx, domain.domain_id, optimizer, distill_here, simcse_here, kd,
                push_queue=False,
            )
            record["replay"] = replay_stats
        records.append(record)
    return records


def estimate_fisher_at_boundary(
    model: MlmEncoder, domain: DomainCorpus, config: TrainConfig, ctx: TrainContext
) -> None:
    """End-of-domain Fisher refresh and anchor snapshot for EWC.

    Runs while the finished domain is still current, so its data is legal
    to read; the passes are tallied as auxiliary (boundary) cost.
    """
    if ctx.fisher is None:
        ctx.fisher = FisherState(gamma=config.ewc_gamma, lam=config.ewc_lambda)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, len(ctx.ledger.domain_order), 0xF1]))
    model.eval()
    for _ in range(config.ewc_fisher_batches):
        picks = rng.integers(0, len(domain.train), size=config.micro_batch_size)
        seqs = [domain.train[i] for i in picks]
        ctx.access_log.log(domain.domain_id, "train", "fisher", domain.domain_id)
        mb = mask_batch(seqs, config.mask_prob, int(rng.integers(0, 2**31)), model.config.vocab_size)
        if mb.n_masked == 0:
            continue
        ewc_accumulate_fisher(model, mb, ctx.fisher)
        ctx.ledger.add(domain.domain_id, forward=1, backward=1, aux=True)
    model.train()
    ewc_set_anchor(model, ctx.fisher)


@dataclass
class StreamRunResult:
    algorithm: str
    checkpoints: list[Checkpoint]
    logs: list[dict]
    ledger: CostLedger
    access_log: DataAccessLog
    memory: ReplayMemory | None
    train_config: TrainConfig
    model_config: ModelConfig


def run_stream(
    stream: DomainStream, model_config: ModelConfig, config: TrainConfig
) -> StreamRunResult:
    """Run the configured algorithm over the whole stream.

    Sequential-family algorithms produce one checkpoint per domain (f_t).
    ``task_specific`` trains an independent model from f_0 for each domain;
    ``mtl`` trains a single model on the shuffled union of all train splits
    and produces one final checkpoint.
    """
    if config.reference_mode:
        torch.set_num_threads(1)
    ctx = TrainContext()
    checkpoints: list[Checkpoint] = []
    logs: list[dict] = []

    if config.algorithm == "task_specific":
        for t, domain in enumerate(stream.domains, start=1):
            model = init_model(model_config, config.seed)
            logs.extend(train_domain(model, domain, config, t=1, ctx=ctx, schedule_t=1))
            checkpoints.append(save_checkpoint(model, t, config.algorithm))
        return StreamRunResult(
            config.algorithm, checkpoints, logs, ctx.ledger, ctx.access_log, None, config, model_config
        )

    if config.algorithm == "mtl":
        union = shuffle_union(stream, config.seed)
        total_steps = config.steps_for_domain(1) + (len(stream) - 1) * config.steps_for_domain(2)
        mtl_config = replace(
            config, algorithm="sequential", steps_first_domain=max(1, round(total_steps / config.steps_multiplier))
        )
        model = init_model(model_config, config.seed)
        logs.extend(train_domain(model, union, mtl_config, t=1, ctx=ctx))
        checkpoints.append(save_checkpoint(model, len(stream), config.algorithm))
        return StreamRunResult(
            config.algorithm, checkpoints, logs, ctx.ledger, ctx.access_log, None, config, model_config
        )

    model = init_model(model_config, config.seed)
    uses_memory = config.algorithm in REPLAY_ALGORITHMS
    if uses_memory:
        ctx.memory = ReplayMemory(capacity=config.memory_capacity)
    if config.kd_kind in ("seed", "seed_logit"):
        ctx.queue = RepresentationQueue(config.queue_capacity)

    for t, domain in enumerate(stream.domains, start=1):
        if config.algorithm == "adapter":
            model.add_adapter(domain.domain_id)
            model.set_active_adapter(domain.domain_id)
        elif config.algorithm == "layer_expand" and t >= 2:
            model.expand_layers(domain.domain_id)
            model.set_active_expansion(domain.domain_id)

        if config.kd_kind is not None and t >= 2:
            teacher = load_checkpoint(checkpoints[-1])
            teacher.requires_grad_(False)
            teacher.eval()
            ctx.teacher = teacher
            if ctx.queue is not None:
                ctx.queue.clear()  # teacher changed; cached representations are stale

        logs.extend(train_domain(model, domain, config, t=t, ctx=ctx))

        if uses_memory:
            boundary_seed = int(np.random.SeedSequence([config.seed, t, 0x3E]).generate_state(1)[0])
            ctx.access_log.log(domain.domain_id, "train", "memory_populate", domain.domain_id)
            ctx.memory = rebalance_after_domain(ctx.memory, domain, boundary_seed)
        if config.algorithm == "ewc":
            estimate_fisher_at_boundary(model, domain, config, ctx)

        checkpoints.append(save_checkpoint(model, t, config.algorithm))

    return StreamRunResult(
        config.algorithm, checkpoints, logs, ctx.ledger, ctx.access_log, ctx.memory, config, model_config
    )
