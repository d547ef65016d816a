"""Shared fixtures and the central-finite-difference gradient oracle.

The finite-difference checker is deliberately independent of anything in
the package: it perturbs raw parameter entries and re-evaluates a loss
closure, so it can referee the analytic gradients.
"""

import numpy as np
import pytest
import torch

from driftlm.corpus import dirichlet_topic_specs, mask_batch, synth_domain_corpus
from driftlm.model import ModelConfig


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def tiny_config(**overrides) -> ModelConfig:
    defaults = dict(
        vocab_size=32,
        max_seq_len=16,
        n_layers=2,
        hidden_dim=16,
        n_heads=2,
        ffn_dim=32,
        dropout_prob=0.0,
        adapter_bottleneck_dim=4,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


def tiny_corpus(seed=0, n_train=64, vocab_size=32, max_len=12, n_topics=2, domain_id="dom"):
    spec = dirichlet_topic_specs([domain_id], vocab_size, vocab_size - 8, n_topics, 0.0, seed=seed)[0]
    return synth_domain_corpus(spec, n_train, max(2, n_train // 10), max_len)


def tiny_batch(seed=0, n=6, vocab_size=32, max_len=12, mask_prob=0.3):
    corpus = tiny_corpus(seed=seed, n_train=max(n, 8), vocab_size=vocab_size, max_len=max_len)
    return mask_batch(list(corpus.train[:n]), mask_prob, seed, vocab_size)


def finite_difference_check(model, loss_fn, n_coords=40, eps=1e-5, seed=0, rtol=1e-4):
    """Compare autograd gradients of ``loss_fn()`` with central differences.

    Samples coordinates across every parameter tensor. Returns the max
    relative error over coordinates whose magnitude is above a floor scaled
    to the loss (pure-noise coordinates are compared absolutely).
    """
    params = [p for p in model.parameters() if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    picks = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.cumsum(sizes) - sizes

    max_rel = 0.0
    for flat_index in picks:
        pi = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        local = int(flat_index - offsets[pi])
        param = params[pi]
        with torch.no_grad():
            orig = param.view(-1)[local].item()
            param.view(-1)[local] = orig + eps
            up = float(loss_fn())
            param.view(-1)[local] = orig - eps
            down = float(loss_fn())
            param.view(-1)[local] = orig
        fd = (up - down) / (2 * eps)
        analytic = 0.0 if grads[pi] is None else float(grads[pi].view(-1)[local])
        scale = max(abs(fd), abs(analytic))
        if scale < 1e-7:
            assert abs(fd - analytic) < 1e-7
            continue
        rel = abs(fd - analytic) / scale
        max_rel = max(max_rel, rel)
        assert rel < rtol, f"param {pi} coord {local}: analytic {analytic} vs fd {fd} (rel {rel:.2e})"
    return max_rel
