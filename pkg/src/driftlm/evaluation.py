"""Downstream tasks, fine-tuning, metrics, and the evaluation protocols.

Three protocols over pretrained checkpoints: knowledge retention (the
lower-triangular matrix of fine-tuned scores over earlier domains'
tasks), adaptation to the latest domain, and temporal generalization
(fine-tune on an earlier step's task data, test on the latest step's
test split). Tasks are synthesized from the same generators as the
pretraining corpora, so labels are recoverable by construction and task
data never touches the pretraining splits.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import (
    DomainCorpus,
    GeneratorSpec,
    MaskedBatch,
    TokenSequence,
    mask_batch,
    sample_labeled_sequences,
)
from .model import Checkpoint, MlmEncoder, load_checkpoint, batch_to_tensors, sentence_representation
from .training import DataAccessLog

log = logging.getLogger(__name__)

TASK_KINDS = ("single", "multi")
METRICS = ("macro_f1", "micro_f1", "lrap")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _to_onehot(labels, n_labels: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((len(labels), n_labels), dtype=bool)
    out[np.arange(len(labels)), labels] = True
    return out


def _as_binary(y, n_labels: int | None) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim == 1:
        if n_labels is None:
            raise ValueError("n_labels required for 1-D label arrays")
        return _to_onehot(arr, n_labels)
    return arr.astype(bool)


def metric_macro_f1(preds, golds, n_labels: int | None = None) -> float:
    """Unweighted mean of per-label F1. Labels with no support and no
    predictions score 0."""
    p = _as_binary(preds, n_labels)
    g = _as_binary(golds, n_labels)
    if p.shape != g.shape:
        raise ValueError("prediction/gold shapes differ")
    tp = (p & g).sum(axis=0).astype(np.float64)
    fp = (p & ~g).sum(axis=0).astype(np.float64)
    fn = (~p & g).sum(axis=0).astype(np.float64)
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())


def metric_micro_f1(preds, golds, n_labels: int | None = None) -> float:
    """F1 over globally pooled true/false positives and negatives."""
    p = _as_binary(preds, n_labels)
    g = _as_binary(golds, n_labels)
    if p.shape != g.shape:
        raise ValueError("prediction/gold shapes differ")
    tp = float((p & g).sum())
    fp = float((p & ~g).sum())
    fn = float((~p & g).sum())
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def metric_lrap(scores: np.ndarray, gold_sets) -> float:
    """Label ranking average precision.

    For each example and each true label j: (number of true labels scored
    at or above j) / (number of all labels scored at or above j), averaged
    over true labels, then over examples. Every example needs at least one
    true label.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n, n_labels = scores.shape
    if isinstance(gold_sets, np.ndarray) and gold_sets.ndim == 2:
        gold = gold_sets.astype(bool)
    else:
        gold = np.zeros_like(scores, dtype=bool)
        for i, labels in enumerate(gold_sets):
            for j in labels:
                gold[i, j] = True
    if gold.shape != scores.shape:
        raise ValueError("scores/golds shapes differ")
    total = 0.0
    for i in range(n):
        true = np.flatnonzero(gold[i])
        if len(true) == 0:
            raise ValueError(f"example {i} has no true labels (LRAP undefined)")
        example = 0.0
        for j in true:
            at_or_above = scores[i] >= scores[i, j]
            rank = int(at_or_above.sum())
            hits = int((at_or_above & gold[i]).sum())
            example += hits / rank
        total += example / len(true)
    return total / n


# ---------------------------------------------------------------------------
# Synthetic downstream tasks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskExample:
    tokens: TokenSequence
    label: int | frozenset


@dataclass(frozen=True)
class DownstreamTask:
    task_id: str
    domain_id: str
    kind: str                 # "single" | "multi"
    n_labels: int
    metric: str
    train: tuple[TaskExample, ...]
    val: tuple[TaskExample, ...]
    test: tuple[TaskExample, ...]
    marker_tokens: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"kind must be one of {TASK_KINDS}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")

    def compatible_with(self, other: "DownstreamTask") -> bool:
        return (self.kind, self.n_labels, self.metric) == (other.kind, other.n_labels, other.metric)


def synth_downstream_task(
    domain: DomainCorpus,
    kind: str,
    n_labels: int,
    n_per_label: int,
    seed: int,
    n_per_label_eval: int | None = None,
    max_len: int = 32,
    metric: str | None = None,
) -> DownstreamTask:
    """Build a balanced labeled task from a generator-backed domain.

    Single-label: the label is the latent topic; examples are sampled
    conditioned on each topic in turn, n_per_label per label per split.
    Multi-label: n_labels marker tokens (the most probable tokens under
    the domain's marginal) act as hashtag-like labels; each example is a
    generated sequence with one guaranteed marker injected, labeled by the
    set of markers it contains. Task data is synthesized fresh from the
    generator, never drawn from the pretraining splits.
    """
    spec = domain.generator
    if spec is None:
        raise ValueError(f"domain {domain.domain_id!r} has no generator; labels need latent structure")
    if kind not in TASK_KINDS:
        raise ValueError(f"kind must be one of {TASK_KINDS}")
    if kind == "single" and n_labels > spec.n_topics:
        raise ValueError(f"single-label task needs n_labels <= {spec.n_topics} topics")
    if n_labels < 2:
        raise ValueError("need at least 2 labels")
    if n_per_label < 1:
        raise ValueError("n_per_label must be >= 1")
    n_eval = n_per_label_eval if n_per_label_eval is not None else n_per_label
    if metric is None:
        metric = "macro_f1" if kind == "single" else "lrap"

    # Seeded by the task seed alone (not the generator's private seed):
    # time steps with identical emission distributions then yield identical
    # tasks, making cross-time comparisons paired.
    root = np.random.SeedSequence([seed, 0x7A5C])
    split_seeds = root.generate_state(6)
    splits = {}
    for split_idx, (split, count) in enumerate([("train", n_per_label), ("val", n_eval), ("test", n_eval)]):
        rng = np.random.default_rng(int(split_seeds[split_idx]))
        examples: list[TaskExample] = []
        if kind == "single":
            for label in range(n_labels):
                seqs = sample_labeled_sequences(
                    spec, label, count, max_len, int(split_seeds[3 + split_idx]) + label
                )
                examples.extend(TaskExample(s, label) for s in seqs)
        else:
            markers = _marker_tokens(spec, n_labels)
            for label in range(n_labels):
                seqs = sample_labeled_sequences(
                    spec,
                    int(rng.integers(0, spec.n_topics)),
                    count,
                    max_len,
                    int(split_seeds[3 + split_idx]) + label,
                )
                for s in seqs:
                    pos = int(rng.integers(1, len(s)))  # never overwrite BOS
                    tokens = (*s[:pos], markers[label], *s[pos + 1 :])
                    present = frozenset(j for j, m in enumerate(markers) if m in tokens)
                    examples.append(TaskExample(tokens, present))
        order = rng.permutation(len(examples))
        splits[split] = tuple(examples[i] for i in order)

    return DownstreamTask(
        task_id=f"{domain.domain_id}/{kind}{n_labels}-s{seed}",
        domain_id=domain.domain_id,
        kind=kind,
        n_labels=n_labels,
        metric=metric,
        train=splits["train"],
        val=splits["val"],
        test=splits["test"],
        marker_tokens=_marker_tokens(spec, n_labels) if kind == "multi" else None,
    )


def _marker_tokens(spec: GeneratorSpec, n_labels: int) -> tuple[int, ...]:
    marginal = np.asarray(spec.topic_mixture) @ np.asarray(spec.topic_emissions)
    top = np.argsort(marginal)[::-1][:n_labels]
    return tuple(int(spec.vocab_subset[i]) for i in sorted(top))


def bayes_accuracy(spec: GeneratorSpec, task: DownstreamTask, split: str = "test") -> float:
    """Accuracy of the exact oracle classifier on a labeled split.

    Single-label: posterior argmax_j sum_t log emission_j(t) under a
    uniform label prior (splits are balanced by construction).
    Multi-label: exact marker extraction. The learnability oracle for
    generator-backed tasks.
    """
    examples = getattr(task, split)
    if task.kind == "multi":
        correct = sum(
            1
            for ex in examples
            if frozenset(j for j, m in enumerate(task.marker_tokens) if m in ex.tokens) == ex.label
        )
        return correct / len(examples)
    emissions = np.asarray(spec.topic_emissions)  # [topics, subset]
    log_em = np.log(np.clip(emissions, 1e-300, None))
    token_to_col = {t: i for i, t in enumerate(spec.vocab_subset)}
    correct = 0
    for ex in examples:
        scores = np.zeros(task.n_labels)
        for t in ex.tokens:
            if t in token_to_col:
                scores += log_em[: task.n_labels, token_to_col[t]]
        if int(np.argmax(scores)) == ex.label:
            correct += 1
    return correct / len(examples)


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 1e-4
    max_epochs: int = 20
    patience: int = 3
    batch_size: int = 32
    weight_decay: float = 0.01
    # False = linear probe: backbone frozen, head trained on cached
    # deterministic representations (low-noise readout of feature quality)
    train_backbone: bool = True


@dataclass
class FinetuneResult:
    val_score: float
    test_score: float
    epochs_run: int


def plain_batch(seqs: list[TokenSequence]) -> MaskedBatch:
    """Uncorrupted batch (no masked positions) for classification passes."""
    max_len = max(len(s) for s in seqs)
    n = len(seqs)
    input_ids = np.zeros((n, max_len), dtype=np.int64)
    padding = np.zeros((n, max_len), dtype=bool)
    for i, s in enumerate(seqs):
        input_ids[i, : len(s)] = s
        padding[i, : len(s)] = True
    target = np.full((n, max_len), -100, dtype=np.int64)
    masks = np.zeros((n, max_len), dtype=bool)
    return MaskedBatch(input_ids, target, masks, padding)


def _task_targets(examples, kind: str, n_labels: int) -> torch.Tensor:
    if kind == "single":
        return torch.tensor([ex.label for ex in examples], dtype=torch.long)
    out = torch.zeros(len(examples), n_labels)
    for i, ex in enumerate(examples):
        for j in ex.label:
            out[i, j] = 1.0
    return out


def _score_split(model, head, examples, task, batch_size: int = 128) -> float:
    model.eval()
    head.eval()
    all_scores = []
    with torch.no_grad():
        for lo in range(0, len(examples), batch_size):
            chunk = examples[lo : lo + batch_size]
            mb = plain_batch([ex.tokens for ex in chunk])
            reps = sentence_representation(model, mb)
            all_scores.append(head(reps))
    logits = torch.cat(all_scores)
    golds = _task_targets(examples, task.kind, task.n_labels)
    if task.kind == "single":
        preds = logits.argmax(dim=-1).numpy()
        gold = golds.numpy()
        if task.metric == "micro_f1":
            return metric_micro_f1(preds, gold, task.n_labels)
        return metric_macro_f1(preds, gold, task.n_labels)
    scores = torch.sigmoid(logits).numpy()
    gold = golds.numpy().astype(bool)
    if task.metric == "lrap":
        return metric_lrap(scores, gold)
    preds = scores >= 0.5
    if task.metric == "micro_f1":
        return metric_micro_f1(preds, gold)
    return metric_macro_f1(preds, gold)


def finetune(
    checkpoint: Checkpoint,
    task: DownstreamTask,
    ft_config: FinetuneConfig,
    seed: int,
    eval_task: DownstreamTask | None = None,
    access_log: DataAccessLog | None = None,
) -> FinetuneResult:
    """Fine-tune a checkpoint on a task: linear head on the sentence
    representation, early stopping on the validation metric.

    ``eval_task`` substitutes the test split (temporal generalization:
    train on an earlier step's task, test on the latest step's). The
    fine-tuning stage touches only task splits; it has no code path into
    pretraining corpora, which is what the access-log audit checks.
    """
    if len(task.train) == 0:
        raise ValueError("task train split is empty")
    if eval_task is not None and not task.compatible_with(eval_task):
        raise ValueError("train/eval tasks have mismatched label spaces")
    test_examples = (eval_task or task).test

    torch.manual_seed(seed)
    model = load_checkpoint(checkpoint)
    if task.domain_id in model.adapters.keys():
        model.set_active_adapter(task.domain_id)
    elif task.domain_id in model.expansions.keys():
        model.set_active_expansion(task.domain_id)
    head = nn.Linear(model.config.hidden_dim, task.n_labels)

    if not ft_config.train_backbone:
        return _probe_finetune(model, head, task, test_examples, eval_task, ft_config, seed)

    params = model.trainable_parameters() + list(head.parameters())
    optimizer = torch.optim.AdamW(params, lr=ft_config.lr, weight_decay=ft_config.weight_decay)
    loss_fn = nn.CrossEntropyLoss() if task.kind == "single" else nn.BCEWithLogitsLoss()

    rng = np.random.default_rng(seed)
    best_val = -float("inf")
    best_state = None
    bad_epochs = 0
    epochs_run = 0
    for epoch in range(ft_config.max_epochs):
        epochs_run = epoch + 1
        model.train()
        head.train()
        order = rng.permutation(len(task.train))
        for lo in range(0, len(order), ft_config.batch_size):
            chunk = [task.train[i] for i in order[lo : lo + ft_config.batch_size]]
            mb = plain_batch([ex.tokens for ex in chunk])
            reps = sentence_representation(model, mb)
            logits = head(reps)
            targets = _task_targets(chunk, task.kind, task.n_labels)
            loss = loss_fn(logits, targets)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
        val = _score_split(model, head, task.val, task)
        if val > best_val:
            best_val = val
            best_state = (
                copy.deepcopy(model.state_dict()),
                copy.deepcopy(head.state_dict()),
            )
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= ft_config.patience:
                break
    model.load_state_dict(best_state[0])
    head.load_state_dict(best_state[1])
    test = _score_split(model, head, test_examples, eval_task or task)
    return FinetuneResult(val_score=best_val, test_score=test, epochs_run=epochs_run)


def _cached_reps(model, examples, batch_size: int = 256) -> torch.Tensor:
    model.eval()
    chunks = []
    with torch.no_grad():
        for lo in range(0, len(examples), batch_size):
            mb = plain_batch([ex.tokens for ex in examples[lo : lo + batch_size]])
            chunks.append(sentence_representation(model, mb))
    return torch.cat(chunks)


def _probe_score(head, reps, examples, task) -> float:
    with torch.no_grad():
        logits = head(reps)
    golds = _task_targets(examples, task.kind, task.n_labels)
    if task.kind == "single":
        preds = logits.argmax(dim=-1).numpy()
        fn = metric_micro_f1 if task.metric == "micro_f1" else metric_macro_f1
        return fn(preds, golds.numpy(), task.n_labels)
    scores = torch.sigmoid(logits).numpy()
    gold = golds.numpy().astype(bool)
    if task.metric == "lrap":
        return metric_lrap(scores, gold)
    preds = scores >= 0.5
    return metric_micro_f1(preds, gold) if task.metric == "micro_f1" else metric_macro_f1(preds, gold)


def _probe_finetune(model, head, task, test_examples, eval_task, ft_config, seed) -> FinetuneResult:
    """Linear probe: train only the head on frozen, deterministic reps."""
    train_reps = _cached_reps(model, task.train)
    val_reps = _cached_reps(model, task.val)
    test_reps = _cached_reps(model, test_examples)
    targets = _task_targets(task.train, task.kind, task.n_labels)
    loss_fn = nn.CrossEntropyLoss() if task.kind == "single" else nn.BCEWithLogitsLoss()
    optimizer = torch.optim.AdamW(head.parameters(), lr=ft_config.lr, weight_decay=ft_config.weight_decay)
    rng = np.random.default_rng(seed)
    best_val = -float("inf")
    best_state = None
    bad_epochs = 0
    epochs_run = 0
    for epoch in range(ft_config.max_epochs):
        epochs_run = epoch + 1
        order = rng.permutation(len(task.train))
        head.train()
        for lo in range(0, len(order), ft_config.batch_size):
            idx = torch.from_numpy(order[lo : lo + ft_config.batch_size])
            loss = loss_fn(head(train_reps[idx]), targets[idx])
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
        head.eval()
        val = _probe_score(head, val_reps, task.val, task)
        if val > best_val:
            best_val = val
            best_state = copy.deepcopy(head.state_dict())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= ft_config.patience:
                break
    head.load_state_dict(best_state)
    test = _probe_score(head, test_reps, test_examples, eval_task or task)
    return FinetuneResult(val_score=best_val, test_score=test, epochs_run=epochs_run)


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CellStats:
    mean: float
    std: float
    scores: tuple[float, ...]


@dataclass
class RetentionMatrix:
    """Scores of fine-tuned checkpoints, indexed by (checkpoint step i,
    task) with the task's domain step t <= i."""

    cells: dict[tuple[int, str], CellStats] = field(default_factory=dict)
    task_step: dict[str, int] = field(default_factory=dict)
    seeds: tuple[int, ...] = ()

    def forgetting_delta(self, task_id: str, final_step: int) -> float:
        """score(f_t on the task) - score(f_final on the task), t = task's own step."""
        t = self.task_step[task_id]
        return self.cells[(t, task_id)].mean - self.cells[(final_step, task_id)].mean


def _finetune_job(args):
    """Top-level worker so retention cells can fan out across processes."""
    ckpt, task, ft_config, seed = args
    torch.set_num_threads(1)
    return finetune(ckpt, task, ft_config, seed).test_score


def retention_matrix(
    checkpoints: list[Checkpoint],
    tasks: list[tuple[int, DownstreamTask]],
    ft_config: FinetuneConfig,
    seeds: tuple[int, ...],
    job_map=map,
) -> RetentionMatrix:
    """Fill all (checkpoint i, task from step t <= i) cells.

    ``checkpoints[i-1]`` is f_i; ``tasks`` pairs each task with the stream
    step of its domain. Each cell averages one fine-tuning per seed.
    Fine-tuning jobs are independent; ``job_map`` may be a pool's map.
    """
    if len(seeds) < 3:
        raise ValueError("retention protocol requires >= 3 fine-tuning seeds per cell")
    steps = {ckpt.time_step for ckpt in checkpoints}
    matrix = RetentionMatrix(seeds=tuple(seeds))
    for t, task in tasks:
        if t not in steps:
            raise ValueError(f"no checkpoint for task step {t}")
        matrix.task_step[task.task_id] = t
    cells = [
        (ckpt.time_step, task.task_id, ckpt, task)
        for ckpt in checkpoints
        for t, task in tasks
        if t <= ckpt.time_step
    ]
    jobs = [(ckpt, task, ft_config, seed) for _, _, ckpt, task in cells for seed in seeds]
    results = list(job_map(_finetune_job, jobs))
    n = len(seeds)
    for idx, (step, task_id, _, _) in enumerate(cells):
        scores = tuple(results[idx * n : (idx + 1) * n])
        matrix.cells[(step, task_id)] = CellStats(
            mean=float(np.mean(scores)), std=float(np.std(scores)), scores=scores
        )
    return matrix


def temporal_generalization(
    final_checkpoint: Checkpoint,
    train_task: DownstreamTask,
    test_task: DownstreamTask,
    ft_config: FinetuneConfig,
    seeds: tuple[int, ...],
) -> CellStats:
    """Fine-tune f_T on an earlier step's task, evaluate on the latest
    step's test split."""
    scores = tuple(
        finetune(final_checkpoint, train_task, ft_config, seed, eval_task=test_task).test_score
        for seed in seeds
    )
    return CellStats(mean=float(np.mean(scores)), std=float(np.std(scores)), scores=scores)


def mlm_log_perplexity(
    model: MlmEncoder,
    heldout: tuple[TokenSequence, ...],
    mask_seed: int,
    mask_prob: float = 0.15,
    batch_size: int = 64,
    access_log: DataAccessLog | None = None,
    domain_id: str | None = None,
) -> float:
    """Mean masked cross-entropy in nats under a fixed mask seed.

    The fixed seed makes scores comparable across checkpoints: every model
    sees the same corrupted positions. Bitwise reproducible.
    """
    if len(heldout) == 0:
        raise ValueError("heldout split is empty")
    if access_log is not None:
        access_log.log(domain_id or "?", "heldout", "eval", None)
    model.eval()
    total_nll = 0.0
    total_masked = 0
    with torch.no_grad():
        for i, lo in enumerate(range(0, len(heldout), batch_size)):
            seqs = list(heldout[lo : lo + batch_size])
            mb = mask_batch(seqs, mask_prob, (mask_seed + i) % 2**31, model.config.vocab_size)
            if mb.n_masked == 0:
                continue
            input_ids, target_ids, mask_positions, padding_mask = batch_to_tensors(mb)
            hidden = model.encode(input_ids, padding_mask)
            logits = model.logits(hidden)
            nll = F.cross_entropy(logits[mask_positions], target_ids[mask_positions], reduction="sum")
            total_nll += float(nll)
            total_masked += mb.n_masked
    if total_masked == 0:
        raise ValueError("no positions were masked over the heldout set")
    return total_nll / total_masked


def subsample_task(task: DownstreamTask, shots: int, seed: int) -> DownstreamTask:
    """Stratified subsample of the train split down to ``shots`` examples."""
    if shots > len(task.train):
        raise ValueError(f"shots={shots} exceeds train size {len(task.train)}")
    if shots == len(task.train):
        return task
    rng = np.random.default_rng(seed)
    by_label: dict = {}
    for i, ex in enumerate(task.train):
        key = ex.label if task.kind == "single" else min(ex.label)
        by_label.setdefault(key, []).append(i)
    pools = [rng.permutation(v).tolist() for v in by_label.values()]
    picked: list[int] = []
    while len(picked) < shots:
        for pool in pools:
            if pool and len(picked) < shots:
                picked.append(pool.pop())
    train = tuple(task.train[i] for i in sorted(picked))
    return DownstreamTask(
        task_id=f"{task.task_id}@{shots}shot",
        domain_id=task.domain_id,
        kind=task.kind,
        n_labels=task.n_labels,
        metric=task.metric,
        train=train,
        val=task.val,
        test=task.test,
        marker_tokens=task.marker_tokens,
    )


@dataclass(frozen=True)
class ShotPoint:
    shots: int
    mean: float
    std: float
    scores: tuple[float, ...]


def kshot_curve(
    checkpoint: Checkpoint,
    task: DownstreamTask,
    shot_sizes: list[int],
    ft_config: FinetuneConfig,
    seeds: tuple[int, ...],
) -> list[ShotPoint]:
    """Score vs train-set size, seeded subsamples per point."""
    points = []
    for shots in shot_sizes:
        scores = []
        for seed in seeds:
            sub = subsample_task(task, shots, seed)
            scores.append(finetune(checkpoint, sub, ft_config, seed).test_score)
        mean, std = float(np.mean(scores)), float(np.std(scores))
        prev = points[-1] if points else None
        if prev is not None and mean < prev.mean - prev.std - std:
            log.info("k-shot curve dips at %d shots (%.4f after %.4f)", shots, mean, prev.mean)
        points.append(ShotPoint(shots, mean, std, tuple(scores)))
    return points
