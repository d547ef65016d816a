"""Small transformer encoder with an MLM head.

The encoder is deliberately explicit (own layer stack rather than
``nn.TransformerEncoder``) because per-domain adapters and per-domain
top-layer expansion need layer-level control, and the double-precision
finite-difference tests need a model whose every parameter is reachable.

Per-domain parameter sets:
  * adapters: one bottleneck (down-project, GELU, up-project, residual)
    after each layer's feed-forward block, zero-initialized up-projection
    so a fresh adapter is a near-identity map; while an adapter is active
    the backbone is frozen (the MLM head stays trainable by default).
  * expansions: a private copy of the top two layers plus the MLM head,
    initialized from the current shared values; while an expansion is
    active everything below it is frozen.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import BOS_ID, MaskedBatch

CHECKPOINT_FORMAT = "driftlm-checkpoint-v1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 1024
    max_seq_len: int = 64
    n_layers: int = 4
    hidden_dim: int = 128
    n_heads: int = 4
    ffn_dim: int = 512
    dropout_prob: float = 0.1
    adapter_bottleneck_dim: int = 32
    adapter_train_head: bool = True        # MLM head stays trainable alongside adapters
    adapter_train_layernorm: bool = False  # whether layer norms train with adapters

    def __post_init__(self):
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.n_layers < 2:
            raise ValueError("n_layers must be >= 2 (top-two-layer expansion)")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must be in [0, 1)")
        for name in ("vocab_size", "max_seq_len", "hidden_dim", "ffn_dim", "adapter_bottleneck_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def parameter_count(config: ModelConfig) -> int:
    """Closed-form backbone + head parameter count (no adapters/expansions).

    embeddings: V*H + L*H, embedding LN: 2H
    per layer: attention 4*(H*H+H), two LNs 4H, FFN H*F+F + F*H+H
    head: dense H*H+H, LN 2H, decoder H*V+V
    """
    v, l, h, f = config.vocab_size, config.max_seq_len, config.hidden_dim, config.ffn_dim
    per_layer = 4 * (h * h + h) + 4 * h + (h * f + f) + (f * h + h)
    head = (h * h + h) + 2 * h + (h * v + v)
    return v * h + l * h + 2 * h + config.n_layers * per_layer + head


def adapter_parameter_count(config: ModelConfig) -> int:
    """Parameters added by one per-domain adapter set (one bottleneck per layer)."""
    h, a = config.hidden_dim, config.adapter_bottleneck_dim
    return config.n_layers * ((h * a + a) + (a * h + h))


class Adapter(nn.Module):
    """Bottleneck adapter; zero-init up-projection makes it near-identity."""

    def __init__(self, hidden_dim: int, bottleneck_dim: int):
        super().__init__()
        self.down = nn.Linear(hidden_dim, bottleneck_dim)
        self.up = nn.Linear(bottleneck_dim, hidden_dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x):
        return x + self.up(F.gelu(self.down(x)))


class EncoderLayer(nn.Module):
    """Post-LN transformer layer: self-attention block then FFN block."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn = nn.MultiheadAttention(
            config.hidden_dim, config.n_heads, dropout=config.dropout_prob, batch_first=True
        )
        self.attn_norm = nn.LayerNorm(config.hidden_dim)
        self.ffn = nn.Sequential(
            nn.Linear(config.hidden_dim, config.ffn_dim),
            nn.GELU(),
            nn.Linear(config.ffn_dim, config.hidden_dim),
        )
        self.ffn_norm = nn.LayerNorm(config.hidden_dim)
        self.dropout = nn.Dropout(config.dropout_prob)

    def forward(self, x, key_padding_mask):
        attn_out, _ = self.attn(x, x, x, key_padding_mask=key_padding_mask, need_weights=False)
        x = self.attn_norm(x + self.dropout(attn_out))
        x = self.ffn_norm(x + self.dropout(self.ffn(x)))
        return x


class MlmHead(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.dense = nn.Linear(config.hidden_dim, config.hidden_dim)
        self.norm = nn.LayerNorm(config.hidden_dim)
        self.decoder = nn.Linear(config.hidden_dim, config.vocab_size)

    def forward(self, h):
        return self.decoder(self.norm(F.gelu(self.dense(h))))


class MlmEncoder(nn.Module):
    """Transformer MLM with optional per-domain adapters or expansions.

    ``active_domain``/``active_kind`` select which per-domain parameter set
    the forward pass routes through; at most one kind is active at a time.
    ``step_counter`` tracks total optimizer steps across domains.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.token_emb = nn.Embedding(config.vocab_size, config.hidden_dim)
        self.pos_emb = nn.Embedding(config.max_seq_len, config.hidden_dim)
        self.emb_norm = nn.LayerNorm(config.hidden_dim)
        self.emb_dropout = nn.Dropout(config.dropout_prob)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.n_layers))
        self.head = MlmHead(config)
        self.adapters = nn.ModuleDict()    # domain_id -> ModuleList[Adapter], one per layer
        self.expansions = nn.ModuleDict()  # domain_id -> ModuleDict(layers=..., head=...)
        self.active_domain: str | None = None
        self.active_kind: str | None = None
        self.register_buffer("step_counter", torch.zeros((), dtype=torch.long))

    # -- per-domain routing ------------------------------------------------

    def _routed_layers_and_head(self):
        layers = list(self.layers)
        head = self.head
        adapters = [None] * len(layers)
        if self.active_kind == "adapter":
            adapters = list(self.adapters[self.active_domain])
        elif self.active_kind == "expansion":
            exp = self.expansions[self.active_domain]
            layers = layers[:-2] + list(exp["layers"])
            head = exp["head"]
        return layers, adapters, head

    def encode(self, input_ids: torch.Tensor, padding_mask: torch.Tensor) -> torch.Tensor:
        """Final-layer hidden states (pre-head), shape [batch, len, hidden]."""
        if int(input_ids.max()) >= self.config.vocab_size:
            raise ValueError("token id exceeds vocab_size")
        if input_ids.shape[1] > self.config.max_seq_len:
            raise ValueError("sequence longer than max_seq_len")
        positions = torch.arange(input_ids.shape[1], device=input_ids.device)
        x = self.token_emb(input_ids) + self.pos_emb(positions)[None, :, :]
        x = self.emb_dropout(self.emb_norm(x))
        key_padding_mask = ~padding_mask
        layers, adapters, _ = self._routed_layers_and_head()
        for layer, adapter in zip(layers, adapters):
            x = layer(x, key_padding_mask)
            if adapter is not None:
                x = adapter(x)
        return x

    def logits(self, hidden: torch.Tensor) -> torch.Tensor:
        _, _, head = self._routed_layers_and_head()
        return head(hidden)

    # -- per-domain parameter sets ------------------------------------------

    def add_adapter(self, domain_id: str) -> None:
        if domain_id in self.adapters:
            raise ValueError(f"adapter for domain {domain_id!r} already exists")
        ref = next(self.parameters())
        mods = nn.ModuleList(
            Adapter(self.config.hidden_dim, self.config.adapter_bottleneck_dim)
            for _ in range(self.config.n_layers)
        )
        self.adapters[domain_id] = mods.to(device=ref.device, dtype=ref.dtype)

    def set_active_adapter(self, domain_id: str | None) -> None:
        if domain_id is None:
            self.active_domain = None
            self.active_kind = None
        else:
            if domain_id not in self.adapters:
                raise ValueError(f"no adapter for domain {domain_id!r}")
            self.active_domain = domain_id
            self.active_kind = "adapter"
        self._apply_freeze()

    def expand_layers(self, domain_id: str) -> None:
        """Give a domain a private copy of the top two layers and the head."""
        if domain_id in self.expansions:
            raise ValueError(f"expansion for domain {domain_id!r} already exists")
        self.expansions[domain_id] = nn.ModuleDict(
            {
                "layers": nn.ModuleList(copy.deepcopy(l) for l in list(self.layers)[-2:]),
                "head": copy.deepcopy(self.head),
            }
        )

    def set_active_expansion(self, domain_id: str | None) -> None:
        if domain_id is None:
            self.active_domain = None
            self.active_kind = None
        else:
            if domain_id not in self.expansions:
                raise ValueError(f"no expansion for domain {domain_id!r}")
            self.active_domain = domain_id
            self.active_kind = "expansion"
        self._apply_freeze()

    def _apply_freeze(self) -> None:
        """Sync requires_grad with the active routing.

        Plain model: everything trains. Active adapter: only that adapter
        (+ head, and optionally layer norms, per config) receives
        gradients. Active expansion: only that domain's top-two-layer and
        head copies receive gradients.
        """
        if self.active_kind is None:
            for p in self.parameters():
                p.requires_grad_(True)
            return
        for p in self.parameters():
            p.requires_grad_(False)
        if self.active_kind == "adapter":
            for p in self.adapters[self.active_domain].parameters():
                p.requires_grad_(True)
            if self.config.adapter_train_head:
                for p in self.head.parameters():
                    p.requires_grad_(True)
            if self.config.adapter_train_layernorm:
                norms = [self.emb_norm]
                for layer in self.layers:
                    norms += [layer.attn_norm, layer.ffn_norm]
                for norm in norms:
                    for p in norm.parameters():
                        p.requires_grad_(True)
        else:
            for p in self.expansions[self.active_domain].parameters():
                p.requires_grad_(True)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]


def init_model(config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> MlmEncoder:
    """Deterministically initialized model (this is f_0)."""
    generator_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = MlmEncoder(config)
    finally:
        torch.random.set_rng_state(generator_state)
    return model.to(dtype)


def batch_to_tensors(batch: MaskedBatch, device=None):
    input_ids = torch.from_numpy(batch.input_ids).to(device=device)
    target_ids = torch.from_numpy(batch.target_ids).to(device=device)
    mask_positions = torch.from_numpy(batch.mask_positions).to(device=device)
    padding_mask = torch.from_numpy(batch.padding_mask).to(device=device)
    return input_ids, target_ids, mask_positions, padding_mask


def forward_mlm(model: MlmEncoder, batch: MaskedBatch):
    """Logits over the vocab at every position plus the MLM loss.

    The loss is the mean cross-entropy over masked positions only. A batch
    with zero masked positions yields loss 0 and ``no_masked=True``.
    Returns (logits, loss, no_masked).
    """
    input_ids, target_ids, mask_positions, padding_mask = batch_to_tensors(batch)
    hidden = model.encode(input_ids, padding_mask)
    logits = model.logits(hidden)
    if batch.n_masked == 0:
        dtype = logits.dtype
        return logits, torch.zeros((), dtype=dtype), True
    flat_logits = logits[mask_positions]
    flat_targets = target_ids[mask_positions]
    loss = F.cross_entropy(flat_logits, flat_targets)
    return logits, loss, False


def mlm_loss_only(model: MlmEncoder, batch: MaskedBatch) -> torch.Tensor:
    return forward_mlm(model, batch)[1]


def token_representations(model: MlmEncoder, batch: MaskedBatch) -> torch.Tensor:
    """Final-layer pre-head states, [batch, len, hidden]."""
    input_ids, _, _, padding_mask = batch_to_tensors(batch)
    return model.encode(input_ids, padding_mask)


def sentence_representation(model: MlmEncoder, batch: MaskedBatch, hidden: torch.Tensor | None = None) -> torch.Tensor:
    """L2-normalized final-layer state of the start-of-sequence token.

    Pass precomputed ``hidden`` states to avoid a second encoder pass.
    """
    if not (batch.input_ids[:, 0] == BOS_ID).all():
        raise ValueError("every sequence must begin with the start-of-sequence token")
    if hidden is None:
        hidden = token_representations(model, batch)
    return F.normalize(hidden[:, 0, :], dim=-1)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Self-describing model snapshot: f_t for a given algorithm run."""

    config: ModelConfig
    time_step: int
    algorithm: str
    config_digest: str
    state_blob: bytes
    state_digest: str
    adapter_domains: tuple[str, ...] = ()
    expansion_domains: tuple[str, ...] = ()

    @property
    def digest(self) -> str:
        return hashlib.sha256(
            (self.config_digest + self.state_digest + f"{self.time_step}:{self.algorithm}").encode()
        ).hexdigest()[:16]


def _state_digest(state_dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state_dict):
        h.update(name.encode())
        h.update(state_dict[name].numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: MlmEncoder, t: int, tag: str) -> Checkpoint:
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    buf = io.BytesIO()
    torch.save(state, buf)
    return Checkpoint(
        config=model.config,
        time_step=t,
        algorithm=tag,
        config_digest=model.config.digest(),
        state_blob=buf.getvalue(),
        state_digest=_state_digest(state),
        adapter_domains=tuple(model.adapters.keys()),
        expansion_domains=tuple(model.expansions.keys()),
    )


def load_checkpoint(ckpt: Checkpoint) -> MlmEncoder:
    if ckpt.config.digest() != ckpt.config_digest:
        raise ValueError("checkpoint config digest mismatch")
    state = torch.load(io.BytesIO(ckpt.state_blob), weights_only=True)
    if _state_digest(state) != ckpt.state_digest:
        raise ValueError("checkpoint parameter digest mismatch (corrupted state)")
    model = MlmEncoder(ckpt.config)
    for domain in ckpt.adapter_domains:
        model.add_adapter(domain)
    for domain in ckpt.expansion_domains:
        model.expand_layers(domain)
    dtype = state["token_emb.weight"].dtype
    model = model.to(dtype)
    model.load_state_dict(state)
    return model


def write_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(ckpt.config),
        "config_digest": ckpt.config_digest,
        "time_step": ckpt.time_step,
        "algorithm": ckpt.algorithm,
        "state_blob": ckpt.state_blob,
        "state_digest": ckpt.state_digest,
        "adapter_domains": ckpt.adapter_domains,
        "expansion_domains": ckpt.expansion_domains,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> Checkpoint:
    try:
        payload = torch.load(path, weights_only=False)
    except Exception as exc:
        raise ValueError(f"unreadable checkpoint file {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    config = ModelConfig(**payload["config"])
    ckpt = Checkpoint(
        config=config,
        time_step=payload["time_step"],
        algorithm=payload["algorithm"],
        config_digest=payload["config_digest"],
        state_blob=payload["state_blob"],
        state_digest=payload["state_digest"],
        adapter_domains=tuple(payload["adapter_domains"]),
        expansion_domains=tuple(payload["expansion_domains"]),
    )
    if config.digest() != ckpt.config_digest:
        raise ValueError(f"config digest mismatch in {path}")
    return ckpt
