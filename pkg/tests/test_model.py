import math

import numpy as np
import pytest
import torch

from driftlm.corpus import BOS_ID, MaskedBatch, mask_batch
from driftlm.model import (
    ModelConfig,
    adapter_parameter_count,
    forward_mlm,
    init_model,
    load_checkpoint,
    parameter_count,
    read_checkpoint,
    save_checkpoint,
    sentence_representation,
    token_representations,
    write_checkpoint,
)

from conftest import finite_difference_check, tiny_batch, tiny_config


def params_bytes(model):
    return [p.detach().clone() for p in model.parameters()]


def assert_params_equal(before, after):
    for a, b in zip(before, after):
        assert torch.equal(a, b)


class TestInit:
    def test_same_seed_bitwise_identical(self):
        a = init_model(tiny_config(), seed=3)
        b = init_model(tiny_config(), seed=3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_different_seed_differs(self):
        a = init_model(tiny_config(), seed=3)
        b = init_model(tiny_config(), seed=4)
        assert any(not torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters()))

    def test_single_layer_rejected(self):
        with pytest.raises(ValueError, match="n_layers"):
            tiny_config(n_layers=1)

    def test_head_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            tiny_config(hidden_dim=15)

    def test_parameter_count_matches_closed_form(self):
        for config in (tiny_config(), ModelConfig()):
            model = init_model(config, seed=0)
            runtime = sum(p.numel() for p in model.parameters())
            assert runtime == parameter_count(config)

    def test_adapter_parameter_count(self):
        config = tiny_config()
        model = init_model(config, seed=0)
        base = sum(p.numel() for p in model.parameters())
        model.add_adapter("d1")
        assert sum(p.numel() for p in model.parameters()) - base == adapter_parameter_count(config)


class TestForwardMlm:
    def test_zeroed_head_gives_log_vocab(self):
        config = tiny_config()
        model = init_model(config, seed=0)
        with torch.no_grad():
            model.head.decoder.weight.zero_()
            model.head.decoder.bias.zero_()
        mb = tiny_batch()
        _, loss, no_masked = forward_mlm(model, mb)
        assert not no_masked
        assert float(loss.detach()) == pytest.approx(math.log(config.vocab_size), rel=1e-6)

    def test_zero_masked_positions_flagged(self):
        seqs = [(BOS_ID, 5, 6, 7)] * 4
        mb = mask_batch(seqs, 0.5, seed=0, vocab_size=32)
        empty = MaskedBatch(
            input_ids=mb.input_ids,
            target_ids=np.full_like(mb.target_ids, -100),
            mask_positions=np.zeros_like(mb.mask_positions),
            padding_mask=mb.padding_mask,
        )
        model = init_model(tiny_config(), seed=0)
        _, loss, no_masked = forward_mlm(model, empty)
        assert no_masked
        assert float(loss) == 0.0

    def test_logit_shape(self):
        model = init_model(tiny_config(), seed=0)
        mb = tiny_batch(n=5)
        logits, _, _ = forward_mlm(model, mb)
        assert logits.shape == (5, mb.input_ids.shape[1], 32)

    def test_vocab_overflow_rejected(self):
        model = init_model(tiny_config(vocab_size=8), seed=0)
        seqs = [(BOS_ID, 200)]
        mb = mask_batch(seqs, 0.5, 0, vocab_size=8)
        bad = MaskedBatch(
            input_ids=np.array([[BOS_ID, 200]]),
            target_ids=np.full((1, 2), -100),
            mask_positions=np.zeros((1, 2), dtype=bool),
            padding_mask=np.ones((1, 2), dtype=bool),
        )
        with pytest.raises(ValueError, match="vocab"):
            forward_mlm(model, bad)

    def test_mlm_gradients_match_finite_differences(self):
        model = init_model(tiny_config(), seed=1).double()
        mb = tiny_batch(seed=2, n=4)
        model.eval()  # dropout off; loss is deterministic for the oracle
        max_rel = finite_difference_check(model, lambda: forward_mlm(model, mb)[1], n_coords=60)
        assert max_rel < 1e-4


class TestRepresentations:
    def test_eval_mode_deterministic(self):
        model = init_model(tiny_config(dropout_prob=0.2), seed=0)
        model.eval()
        mb = tiny_batch()
        a = token_representations(model, mb)
        b = token_representations(model, mb)
        assert torch.equal(a, b)

    def test_train_mode_dropout_differs(self):
        model = init_model(tiny_config(dropout_prob=0.2), seed=0)
        model.train()
        mb = tiny_batch()
        a = token_representations(model, mb)
        b = token_representations(model, mb)
        assert not torch.equal(a, b)

    def test_padding_invariance(self):
        # same sequences, two padded widths: real positions must agree
        model = init_model(tiny_config(), seed=0)
        model.eval()
        seqs = [(BOS_ID, 5, 6, 7), (BOS_ID, 8, 9, 10)]
        short = mask_batch(seqs, 0.3, 0, 32)
        padded_inputs = np.pad(short.input_ids, ((0, 0), (0, 5)))
        longer = MaskedBatch(
            input_ids=padded_inputs,
            target_ids=np.pad(short.target_ids, ((0, 0), (0, 5)), constant_values=-100),
            mask_positions=np.pad(short.mask_positions, ((0, 0), (0, 5))),
            padding_mask=np.pad(short.padding_mask, ((0, 0), (0, 5))),
        )
        a = token_representations(model, short)
        b = token_representations(model, longer)
        assert torch.allclose(a, b[:, :4, :], atol=1e-6)

    def test_sentence_rep_unit_norm(self):
        model = init_model(tiny_config(), seed=0)
        model.eval()
        reps = sentence_representation(model, tiny_batch(n=8))
        norms = reps.norm(dim=-1)
        assert torch.allclose(norms, torch.ones_like(norms), atol=1e-6)

    def test_identical_sequences_identical_reps(self):
        from driftlm.evaluation import plain_batch

        model = init_model(tiny_config(), seed=0)
        model.eval()
        mb = plain_batch([(BOS_ID, 4, 5, 6)] * 3)
        reps = sentence_representation(model, mb)
        assert torch.equal(reps[0], reps[1])
        assert torch.equal(reps[0], reps[2])

    def test_equals_normalized_position_zero(self):
        model = init_model(tiny_config(), seed=0)
        model.eval()
        mb = tiny_batch(n=4)
        h = token_representations(model, mb)
        expected = h[:, 0, :] / h[:, 0, :].norm(dim=-1, keepdim=True)
        assert torch.allclose(sentence_representation(model, mb), expected, atol=1e-6)

    def test_missing_bos_rejected(self):
        model = init_model(tiny_config(), seed=0)
        mb = MaskedBatch(
            input_ids=np.array([[5, 6, 7]]),
            target_ids=np.full((1, 3), -100),
            mask_positions=np.zeros((1, 3), dtype=bool),
            padding_mask=np.ones((1, 3), dtype=bool),
        )
        with pytest.raises(ValueError, match="start-of-sequence"):
            sentence_representation(model, mb)


def train_steps(model, mb, n=3, lr=1e-2):
    optim = torch.optim.AdamW(model.trainable_parameters(), lr=lr)
    for _ in range(n):
        _, loss, _ = forward_mlm(model, mb)
        optim.zero_grad()
        loss.backward()
        optim.step()


class TestAdapters:
    def test_backbone_frozen_bitwise(self):
        model = init_model(tiny_config(), seed=0)
        model.add_adapter("d1")
        model.set_active_adapter("d1")
        backbone = [p.detach().clone() for n, p in model.named_parameters()
                    if not n.startswith(("adapters", "head"))]
        train_steps(model, tiny_batch())
        after = [p.detach().clone() for n, p in model.named_parameters()
                 if not n.startswith(("adapters", "head"))]
        assert_params_equal(backbone, after)

    def test_fresh_adapter_near_identity(self):
        model = init_model(tiny_config(), seed=0)
        model.eval()
        mb = tiny_batch()
        base = token_representations(model, mb)
        model.add_adapter("d1")
        model.set_active_adapter("d1")
        with_adapter = token_representations(model, mb)
        assert float((base - with_adapter).detach().abs().max()) <= 1e-3

    def test_two_domains_independent(self):
        model = init_model(tiny_config(), seed=0)
        model.add_adapter("d1")
        model.add_adapter("d2")
        d2_before = [p.detach().clone() for p in model.adapters["d2"].parameters()]
        model.set_active_adapter("d1")
        train_steps(model, tiny_batch())
        d2_after = [p.detach().clone() for p in model.adapters["d2"].parameters()]
        assert_params_equal(d2_before, d2_after)

    def test_duplicate_and_unknown_domains(self):
        model = init_model(tiny_config(), seed=0)
        model.add_adapter("d1")
        with pytest.raises(ValueError, match="already"):
            model.add_adapter("d1")
        with pytest.raises(ValueError, match="no adapter"):
            model.set_active_adapter("nope")


class TestExpansion:
    def test_output_identical_right_after_expansion(self):
        model = init_model(tiny_config(), seed=0)
        model.eval()
        mb = tiny_batch()
        base = forward_mlm(model, mb)[0]
        model.expand_layers("d2")
        model.set_active_expansion("d2")
        expanded = forward_mlm(model, mb)[0]
        assert torch.equal(base, expanded)

    def test_training_one_expansion_leaves_other_untouched(self):
        model = init_model(tiny_config(), seed=0)
        model.expand_layers("d2")
        model.expand_layers("d3")
        d3_before = [p.detach().clone() for p in model.expansions["d3"].parameters()]
        model.set_active_expansion("d2")
        train_steps(model, tiny_batch())
        d3_after = [p.detach().clone() for p in model.expansions["d3"].parameters()]
        assert_params_equal(d3_before, d3_after)

    def test_frozen_lower_layers_bitwise(self):
        model = init_model(tiny_config(), seed=0)
        model.expand_layers("d2")
        model.set_active_expansion("d2")
        frozen = [p.detach().clone() for n, p in model.named_parameters()
                  if not n.startswith("expansions")]
        train_steps(model, tiny_batch())
        after = [p.detach().clone() for n, p in model.named_parameters()
                 if not n.startswith("expansions")]
        assert_params_equal(frozen, after)


class TestCheckpoint:
    def test_round_trip_forward_identical(self):
        model = init_model(tiny_config(), seed=0)
        train_steps(model, tiny_batch())
        model.eval()
        mb = tiny_batch(seed=5)
        before = forward_mlm(model, mb)[0]
        ckpt = save_checkpoint(model, t=2, tag="sequential")
        loaded = load_checkpoint(ckpt)
        loaded.eval()
        after = forward_mlm(loaded, mb)[0]
        assert torch.equal(before, after)

    def test_metadata_recorded(self):
        model = init_model(tiny_config(), seed=0)
        ckpt = save_checkpoint(model, t=3, tag="er")
        assert ckpt.time_step == 3
        assert ckpt.algorithm == "er"
        assert ckpt.config_digest == model.config.digest()

    def test_file_round_trip(self, tmp_path):
        model = init_model(tiny_config(), seed=1)
        model.add_adapter("d1")
        ckpt = save_checkpoint(model, t=1, tag="adapter")
        path = tmp_path / "f1.ckpt"
        write_checkpoint(ckpt, path)
        again = read_checkpoint(path)
        assert again.state_digest == ckpt.state_digest
        loaded = load_checkpoint(again)
        assert "d1" in loaded.adapters

    def test_corrupted_file_rejected(self, tmp_path):
        model = init_model(tiny_config(), seed=1)
        ckpt = save_checkpoint(model, t=1, tag="sequential")
        path = tmp_path / "f1.ckpt"
        write_checkpoint(ckpt, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError):
            load_checkpoint(read_checkpoint(path))

    def test_garbage_file_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            read_checkpoint(path)

    def test_double_precision_round_trip(self):
        model = init_model(tiny_config(), seed=0).double()
        ckpt = save_checkpoint(model, t=1, tag="sequential")
        loaded = load_checkpoint(ckpt)
        assert next(loaded.parameters()).dtype == torch.float64
