import pytest
import torch

from driftlm.corpus import build_stream, dirichlet_topic_specs, mask_batch, synth_domain_corpus
from driftlm.memory import ReplayMemory, rebalance_after_domain
from driftlm.model import init_model, load_checkpoint
from driftlm.training import (
    CostCounts,
    FisherState,
    TrainConfig,
    TrainContext,
    cost_closed_form,
    ewc_accumulate_fisher,
    ewc_penalty,
    ewc_set_anchor,
    run_stream,
    train_domain,
    verify_ledger,
)

from conftest import tiny_config


def small_stream(n_domains=2, n_train=80, seed=0, vocab_size=32, max_len=10):
    specs = dirichlet_topic_specs(
        [f"d{i}" for i in range(1, n_domains + 1)], vocab_size, 8, 2,
        overlap_fraction=0.25, seed=seed,
    )
    corpora = [synth_domain_corpus(s, n_train, 8, max_len) for s in specs]
    return build_stream(corpora, "domain-incremental")


def small_config(**overrides):
    defaults = dict(
        algorithm="sequential",
        steps_first_domain=6,
        steps_later_domain=4,
        effective_batch_size=4,
        lr_init=1e-3,
        memory_capacity=16,
        queue_capacity=32,
        seed=0,
    )
    defaults.update(overrides)
    defaults.setdefault("micro_batch_size", defaults["effective_batch_size"])
    return TrainConfig(**defaults)


class TestClosedForm:
    """The compute-accounting table, b=400, integer-exact."""

    B = 400

    def test_sequential_2b(self):
        assert cost_closed_form("sequential", 10, 1, self.B) == CostCounts(400, 400)

    def test_er_default_2_2b(self):
        c = cost_closed_form("er", 10, 1, self.B)
        assert c == CostCounts(440, 440)
        assert c.total == int(2.2 * self.B)

    def test_logit_kd_3_3b(self):
        c = cost_closed_form("logit_kd", 10, 1, self.B)
        assert c == CostCounts(880, 440)
        assert c.total == int(3.3 * self.B)

    def test_seed_logit_kd_5_5b(self):
        c = cost_closed_form("seed_logit_kd", 10, 1, self.B)
        assert c == CostCounts(1320, 880)
        assert c.total == int(5.5 * self.B)

    def test_sparse_logit_kd_2_4b(self):
        c = cost_closed_form("logit_kd", 10, 10, self.B)
        assert c == CostCounts(520, 440)
        assert c.total == int(2.4 * self.B)

    def test_er_k5_2_4b(self):
        assert cost_closed_form("er", 5, 1, self.B).total == int(2.4 * self.B)

    def test_sequential_times_1_2(self):
        c = cost_closed_form("sequential", 10, 1, self.B, steps_multiplier=1.2)
        assert c == CostCounts(480, 480)
        assert c.total == int(2.4 * self.B)

    def test_sparse_seed_logit_without_contrastive(self):
        c = cost_closed_form("seed_logit_kd", 10, 10, self.B, simcse=False)
        assert c.total == int(2.4 * self.B)

    def test_rep_kd_matches_logit_kd_costs(self):
        assert cost_closed_form("rep_kd", 10, 1, self.B) == cost_closed_form("logit_kd", 10, 1, self.B)

    def test_unknown_algorithm_rejected(self):
        with pytest.raises(ValueError, match="unknown algorithm"):
            cost_closed_form("magic", 10, 1, self.B)


class TestTrainDomain:
    def test_replay_schedule_arithmetic(self):
        # 100 stream steps at k=10 -> exactly 10 replay events
        stream = small_stream(n_domains=2, n_train=220, seed=1)
        config = small_config(
            algorithm="er", steps_first_domain=20, steps_later_domain=100,
            effective_batch_size=2, replay_every=10, memory_capacity=8,
        )
        result = run_stream(stream, tiny_config(), config)
        d2_records = [r for r in result.logs if r["t"] == 2]
        assert len(d2_records) == 100
        assert sum(1 for r in d2_records if r["replay"] is not None) == 10

    def test_first_domain_has_no_replay_or_distillation(self):
        stream = small_stream(n_domains=2, n_train=40, seed=2)
        config = small_config(algorithm="logit_kd", steps_first_domain=5, steps_later_domain=3)
        result = run_stream(stream, tiny_config(), config)
        d1_records = [r for r in result.logs if r["t"] == 1]
        assert all(r["replay"] is None for r in d1_records)
        assert all(r["kd"] is None for r in d1_records)
        d2_records = [r for r in result.logs if r["t"] == 2]
        assert all(r["kd"] is not None for r in d2_records)

    def test_lr_linear_decay_to_zero(self):
        stream = small_stream(n_domains=2, n_train=80, seed=3)
        config = small_config(steps_first_domain=8, steps_later_domain=4, lr_init=1e-3)
        result = run_stream(stream, tiny_config(), config)
        d1 = [r for r in result.logs if r["t"] == 1]
        assert d1[0]["lr"] == pytest.approx(1e-3)
        assert d1[-1]["lr"] == pytest.approx(1e-3 / 8)
        assert d1[-1]["lr"] <= config.lr_init / 8 + 1e-12

    def test_corpus_too_small_fails_before_training(self):
        stream = small_stream(n_domains=2, n_train=10, seed=4)
        config = small_config(steps_first_domain=50)
        model = init_model(tiny_config(), seed=0)
        before = [p.detach().clone() for p in model.parameters()]
        with pytest.raises(ValueError, match="single-epoch"):
            train_domain(model, stream.domains[0], config, t=1, ctx=TrainContext())
        for a, b in zip(before, model.parameters()):
            assert torch.equal(a, b)

    def test_single_epoch_no_example_revisited(self):
        stream = small_stream(n_domains=2, n_train=40, seed=5)
        config = small_config(steps_first_domain=10, effective_batch_size=4)
        # 10 steps x batch 4 consumes the whole 40-sequence split exactly once
        result = run_stream(stream, tiny_config(), config)
        reads = [r for r in result.access_log.records if r.stage == "pretrain" and r.domain_id == "d1"]
        assert len(reads) == 10

    def test_teacher_bitwise_constant_and_gradient_free(self):
        stream = small_stream(n_domains=2, n_train=60, seed=6)
        model = init_model(tiny_config(), seed=0)
        teacher = init_model(tiny_config(), seed=1)
        teacher.requires_grad_(False)
        before = [p.detach().clone() for p in teacher.parameters()]
        ctx = TrainContext(teacher=teacher, memory=None)
        config = small_config(algorithm="logit_kd", steps_later_domain=4, replay_every=10)
        memory = rebalance_after_domain(ReplayMemory(8), stream.domains[0], seed=0)
        ctx.memory = memory
        train_domain(model, stream.domains[1], config, t=2, ctx=ctx)
        for a, b in zip(before, teacher.parameters()):
            assert torch.equal(a, b)
        assert all(p.grad is None for p in teacher.parameters())

    def test_queue_distillation_schedule_validation(self):
        stream = small_stream(n_domains=2, n_train=60, seed=7)
        config = small_config(algorithm="seed_kd", distill_every=4, replay_every=2, steps_later_domain=4)
        with pytest.raises(ValueError, match="distill_every <= replay_every"):
            run_stream(stream, tiny_config(), config)


class TestLedger:
    @pytest.mark.parametrize(
        "algorithm,k,kprime,simcse",
        [
            ("sequential", 10, 1, None),
            ("er", 2, 1, None),
            ("er", 4, 1, None),
            ("logit_kd", 2, 1, None),
            ("logit_kd", 2, 2, None),
            ("rep_kd", 2, 1, None),
            ("contrast_kd", 2, 1, None),
            ("seed_kd", 2, 2, None),
            ("seed_logit_kd", 2, 1, None),
            ("seed_logit_kd", 2, 2, False),
            ("ewc", 10, 1, None),
            ("adapter", 10, 1, None),
            ("layer_expand", 10, 1, None),
        ],
    )
    def test_instrumented_counts_match_closed_form(self, algorithm, k, kprime, simcse):
        stream = small_stream(n_domains=2, n_train=60, seed=8)
        config = small_config(
            algorithm=algorithm, steps_first_domain=4, steps_later_domain=8,
            effective_batch_size=2, replay_every=k, distill_every=kprime,
            simcse=simcse, memory_capacity=8, ewc_fisher_batches=2,
        )
        result = run_stream(stream, tiny_config(), config)
        expected = cost_closed_form(algorithm, k, kprime, b=8, simcse=simcse)
        check = verify_ledger(result.ledger, expected, after_first=True)
        assert check.ok, check.report

    def test_steps_multiplier_ledger(self):
        stream = small_stream(n_domains=2, n_train=120, seed=9)
        config = small_config(
            steps_first_domain=5, steps_later_domain=10, effective_batch_size=2,
            steps_multiplier=1.2,
        )
        result = run_stream(stream, tiny_config(), config)
        expected = cost_closed_form("sequential", 10, 1, b=10, steps_multiplier=1.2)
        assert expected == CostCounts(12, 12)
        assert verify_ledger(result.ledger, expected).ok

    def test_mismatch_produces_diff_report(self):
        stream = small_stream(n_domains=2, n_train=40, seed=10)
        config = small_config(steps_first_domain=4, steps_later_domain=4, effective_batch_size=2)
        result = run_stream(stream, tiny_config(), config)
        check = verify_ledger(result.ledger, CostCounts(999, 999))
        assert not check.ok
        assert "expected 999" in check.report

    def test_micro_batching_does_not_change_counts(self):
        stream = small_stream(n_domains=2, n_train=80, seed=11)
        base = small_config(steps_first_domain=4, steps_later_domain=4, effective_batch_size=4)
        split = small_config(
            steps_first_domain=4, steps_later_domain=4, effective_batch_size=4, micro_batch_size=2
        )
        a = run_stream(stream, tiny_config(), base).ledger.totals()
        b = run_stream(stream, tiny_config(), split).ledger.totals()
        assert a == b


class TestRunStream:
    def test_sequential_produces_distinct_checkpoints(self):
        stream = small_stream(n_domains=2, n_train=60, seed=12)
        result = run_stream(stream, tiny_config(), small_config())
        assert len(result.checkpoints) == 2
        assert result.checkpoints[0].state_digest != result.checkpoints[1].state_digest
        assert [c.time_step for c in result.checkpoints] == [1, 2]

    def test_task_specific_touches_one_domain_each(self):
        stream = small_stream(n_domains=3, n_train=40, seed=13)
        config = small_config(algorithm="task_specific", steps_first_domain=4)
        result = run_stream(stream, tiny_config(), config)
        assert len(result.checkpoints) == 3
        # the access log proves per-model isolation: all reads during the
        # t-th training touched only domain t
        for r in result.access_log.records:
            assert r.domain_id == r.current_domain

    def test_storage_constraint_no_earlier_domain_reads(self):
        for algorithm in ("sequential", "er", "logit_kd"):
            stream = small_stream(n_domains=3, n_train=60, seed=14)
            config = small_config(algorithm=algorithm, steps_first_domain=4, steps_later_domain=4)
            result = run_stream(stream, tiny_config(), config)
            assert result.access_log.pretraining_violations() == []

    def test_mtl_trains_on_union(self):
        stream = small_stream(n_domains=2, n_train=30, seed=15)
        config = small_config(algorithm="mtl", steps_first_domain=4, steps_later_domain=4)
        result = run_stream(stream, tiny_config(), config)
        assert len(result.checkpoints) == 1
        assert result.checkpoints[0].time_step == 2
        assert all("union" in r.domain_id for r in result.access_log.records if r.stage == "pretrain")

    def test_adapter_run_registers_per_domain_adapters(self):
        stream = small_stream(n_domains=2, n_train=40, seed=16)
        config = small_config(algorithm="adapter", steps_first_domain=3, steps_later_domain=3)
        result = run_stream(stream, tiny_config(), config)
        final = load_checkpoint(result.checkpoints[-1])
        assert set(final.adapters.keys()) == {"d1", "d2"}

    def test_layer_expansion_starts_at_second_domain(self):
        stream = small_stream(n_domains=3, n_train=40, seed=17)
        config = small_config(algorithm="layer_expand", steps_first_domain=3, steps_later_domain=3)
        result = run_stream(stream, tiny_config(), config)
        final = load_checkpoint(result.checkpoints[-1])
        assert set(final.expansions.keys()) == {"d2", "d3"}

    def test_memory_balanced_after_each_boundary(self):
        stream = small_stream(n_domains=3, n_train=60, seed=18)
        config = small_config(algorithm="er", steps_first_domain=3, steps_later_domain=3, memory_capacity=10)
        result = run_stream(stream, tiny_config(), config)
        counts = result.memory.domain_counts()
        assert sum(counts.values()) == 10
        assert max(counts.values()) - min(counts.values()) <= 1

    def test_bitwise_determinism_same_seed(self):
        stream = small_stream(n_domains=2, n_train=60, seed=19)
        config = small_config(algorithm="logit_kd", steps_first_domain=4, steps_later_domain=4, replay_every=2)
        a = run_stream(stream, tiny_config(), config)
        b = run_stream(stream, tiny_config(), config)
        assert a.logs == b.logs
        assert [c.state_digest for c in a.checkpoints] == [c.state_digest for c in b.checkpoints]

    def test_different_seed_changes_run(self):
        stream = small_stream(n_domains=2, n_train=60, seed=19)
        a = run_stream(stream, tiny_config(), small_config(seed=1))
        b = run_stream(stream, tiny_config(), small_config(seed=2))
        assert a.logs != b.logs


class TestEwc:
    def make_fisher(self, model):
        state = FisherState(gamma=0.9, lam=100.0)
        stream = small_stream(n_domains=2, n_train=40, seed=20)
        mb = mask_batch(list(stream.domains[0].train[:4]), 0.3, 0, model.config.vocab_size)
        ewc_accumulate_fisher(model, mb, state)
        ewc_set_anchor(model, state)
        return state

    def test_penalty_zero_at_anchor(self):
        model = init_model(tiny_config(), seed=0)
        state = self.make_fisher(model)
        assert float(ewc_penalty(model, state).detach()) == 0.0

    def test_penalty_quadratic_along_ray(self):
        model = init_model(tiny_config(), seed=0)
        state = self.make_fisher(model)
        direction = {n: torch.randn_like(p) for n, p in model.named_parameters()}
        base = {n: p.detach().clone() for n, p in model.named_parameters()}

        def penalty_at(c):
            with torch.no_grad():
                for n, p in model.named_parameters():
                    p.copy_(base[n] + c * direction[n])
            return float(ewc_penalty(model, state).detach())

        p1, p2 = penalty_at(1.0), penalty_at(2.0)
        assert p2 / p1 == pytest.approx(4.0, abs=1e-6)

    def test_fisher_entries_nonnegative(self):
        model = init_model(tiny_config(), seed=0)
        state = self.make_fisher(model)
        assert all((f >= 0).all() for f in state.fisher.values())

    def test_penalty_before_anchor_rejected(self):
        model = init_model(tiny_config(), seed=0)
        with pytest.raises(ValueError, match="anchor"):
            ewc_penalty(model, FisherState())

    def test_decay_blends_old_estimate(self):
        model = init_model(tiny_config(), seed=0)
        state = FisherState(gamma=0.5, lam=1.0)
        stream = small_stream(n_domains=2, n_train=40, seed=21)
        mb = mask_batch(list(stream.domains[0].train[:4]), 0.3, 0, model.config.vocab_size)
        ewc_accumulate_fisher(model, mb, state)
        first = {n: f.clone() for n, f in state.fisher.items()}
        ewc_accumulate_fisher(model, mb, state)
        for n in first:
            expected = 0.5 * first[n] + 0.5 * (first[n] / 0.5)
            assert torch.allclose(state.fisher[n], expected, rtol=1e-5)

    def test_ewc_stream_run_applies_penalty(self):
        stream = small_stream(n_domains=2, n_train=60, seed=22)
        config = small_config(algorithm="ewc", steps_first_domain=4, steps_later_domain=4, ewc_fisher_batches=2)
        result = run_stream(stream, tiny_config(), config)
        assert len(result.checkpoints) == 2
        # fisher batches recorded as auxiliary cost, not training cost
        assert result.ledger.aux_forward["d1"] == 2
        assert result.ledger.totals_after_first() == (4, 4)
