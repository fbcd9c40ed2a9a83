"""A small pre-LayerNorm causal transformer with residual-stream hooks.

Layers are numbered 1..n_layers.  The residual "at layer l" is the stream
value after block l has added its attention and MLP outputs.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import InterventionError, InvalidArgumentError
from ..numerics import softmax

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64
    seed: int = 0

    def validate(self) -> "ModelConfig":
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise InvalidArgumentError(f"{name} must be a positive integer, got {value!r}")
        if self.vocab_size < 4:
            raise InvalidArgumentError("vocab_size must be at least 4")
        if self.d_model % self.n_heads:
            raise InvalidArgumentError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if not -(2**63) <= int(self.seed) < 2**64:
            raise InvalidArgumentError("seed must fit in 64 bits")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ResidualCapture:
    layer: int
    position: int
    vector: np.ndarray


class PositionPolicy(str, Enum):
    LAST_POSITION = "last_position"
    ALL_POSITIONS = "all_positions"


@dataclass(frozen=True)
class InterventionSpec:
    """Replace the post-block residual at ``layer`` using ``delta_fn``.

    ``delta_fn`` maps a float64 residual vector of length d_model to its
    replacement.  With ``vectorized=True`` it instead receives an (n, d_model)
    matrix holding every targeted row and must return the same shape.
    """

    layer: int
    delta_fn: Callable[[np.ndarray], np.ndarray]
    position_policy: PositionPolicy = PositionPolicy.LAST_POSITION
    vectorized: bool = False


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        mask = torch.tril(torch.ones(cfg.max_seq_len, cfg.max_seq_len, dtype=torch.bool))
        self.register_buffer("mask", mask, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, C = x.shape
        hs = C // self.n_heads
        q, k, v = self.qkv(x).split(C, dim=2)
        q = q.view(B, T, self.n_heads, hs).transpose(1, 2)
        k = k.view(B, T, self.n_heads, hs).transpose(1, 2)
        v = v.view(B, T, self.n_heads, hs).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) * (1.0 / math.sqrt(hs))
        att = att.masked_fill(~self.mask[:T, :T], float("-inf"))
        att = F.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).contiguous().view(B, T, C)
        return self.proj(y)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff),
            nn.GELU(),
            nn.Linear(cfg.d_ff, cfg.d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class TinyLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg.validate()
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.unembed = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        # Optional tokenizer vocabulary carried alongside the weights.
        self.vocab: list[str] | None = None

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed) % 2**63)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith(".bias"):
                    p.zero_()
                elif ".ln" in name or name.startswith("ln_"):
                    p.fill_(1.0)
                else:
                    p.copy_(torch.randn(p.shape, generator=gen) * INIT_STD)

    def run(
        self,
        idx: torch.Tensor,
        lengths: Sequence[int] | None = None,
        capture_layers: Iterable[int] = (),
        intervention: InterventionSpec | None = None,
    ) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        """Batched forward over right-padded token ids of shape (B, T).

        Returns logits (B, T, V) and the post-block residuals (B, T, d) of
        every requested layer.
        """
        B, T = idx.shape
        if lengths is None:
            lengths = [T] * B
        capture_layers = set(capture_layers)
        pos = torch.arange(T)
        x = self.tok_emb(idx) + self.pos_emb(pos)[None, :, :]
        captures: dict[int, torch.Tensor] = {}
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if intervention is not None and intervention.layer == i:
                x = _apply_intervention(x, lengths, intervention)
            if i in capture_layers:
                captures[i] = x
        logits = self.unembed(self.ln_f(x))
        return logits, captures


def _apply_intervention(x: torch.Tensor, lengths, spec: InterventionSpec) -> torch.Tensor:
    rows, cols = [], []
    for b, n in enumerate(lengths):
        if spec.position_policy == PositionPolicy.ALL_POSITIONS:
            rows.extend([b] * n)
            cols.extend(range(n))
        else:
            rows.append(b)
            cols.append(n - 1)
    rows_t = torch.tensor(rows, dtype=torch.long)
    cols_t = torch.tensor(cols, dtype=torch.long)
    h = x[rows_t, cols_t].detach().to(torch.float64).numpy()
    if spec.vectorized:
        new = np.asarray(spec.delta_fn(h.copy()), dtype=np.float64)
    else:
        new = np.stack([np.asarray(spec.delta_fn(row.copy()), dtype=np.float64) for row in h])
    if new.shape != h.shape:
        raise InterventionError(f"delta_fn returned shape {new.shape}, expected {h.shape}")
    if not np.all(np.isfinite(new)):
        raise InterventionError("delta_fn returned non-finite entries")
    out = x.clone()
    out[rows_t, cols_t] = torch.from_numpy(new).to(x.dtype)
    return out


# --- functional surface -----------------------------------------------------


def init_model(config: ModelConfig) -> TinyLM:
    config.validate()
    model = TinyLM(config)
    model.reset_parameters(config.seed)
    model.eval()
    return model


def _to_tensor(model: TinyLM, tokens) -> torch.Tensor:
    toks = [int(t) for t in tokens]
    if not 1 <= len(toks) <= model.config.max_seq_len:
        raise InvalidArgumentError(
            f"sequence length {len(toks)} outside [1, {model.config.max_seq_len}]"
        )
    for t in toks:
        if not 0 <= t < model.config.vocab_size:
            raise InvalidArgumentError(f"token id {t} out of range [0, {model.config.vocab_size})")
    return torch.tensor([toks], dtype=torch.long)


def pad_batch(
    model: TinyLM, sequences: Sequence[Sequence[int]], width: int | None = None
) -> tuple[torch.Tensor, list[int]]:
    """Right-pad to ``width`` (default: the longest sequence)."""
    if not sequences:
        raise InvalidArgumentError("empty batch")
    rows = [_to_tensor(model, s)[0] for s in sequences]
    lengths = [len(r) for r in rows]
    out = torch.zeros(len(rows), width or max(lengths), dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out, lengths


def _check_layer(model: TinyLM, layer: int) -> int:
    if not isinstance(layer, (int, np.integer)) or not 1 <= layer <= model.n_layers:
        raise InvalidArgumentError(f"layer {layer!r} outside [1, {model.n_layers}]")
    return int(layer)


def _inference_batch(model: TinyLM, sequences) -> tuple[torch.Tensor, list[int]]:
    # Inference always runs at the full context width.  Kernel choice then
    # never depends on sequence length or batch makeup, which keeps results
    # bit-identical across both.
    return pad_batch(model, sequences, model.config.max_seq_len)


@torch.no_grad()
def forward(model: TinyLM, tokens, capture_layers: Iterable[int] = ()):
    """Logits of shape (T, V) and a ResidualCapture for every (layer, position)."""
    layers = sorted(_check_layer(model, l) for l in set(capture_layers))
    idx, (n,) = _inference_batch(model, [tokens])
    logits, caps = model.run(idx, lengths=[n], capture_layers=layers)
    captures = []
    for layer in layers:
        resid = caps[layer][0, :n].to(torch.float64).numpy()
        captures.extend(
            ResidualCapture(layer, pos, resid[pos].copy()) for pos in range(resid.shape[0])
        )
    return logits[0, :n].to(torch.float64).numpy(), captures


@torch.no_grad()
def forward_with_intervention(model: TinyLM, tokens, spec: InterventionSpec) -> np.ndarray:
    _check_layer(model, spec.layer)
    idx, (n,) = _inference_batch(model, [tokens])
    logits, _ = model.run(idx, lengths=[n], intervention=spec)
    return logits[0, :n].to(torch.float64).numpy()


@torch.no_grad()
def final_logits_batch(
    model: TinyLM,
    sequences: Sequence[Sequence[int]],
    intervention: InterventionSpec | None = None,
) -> np.ndarray:
    """Final-position logits (B, V) for a batch of variable-length sequences."""
    if intervention is not None:
        _check_layer(model, intervention.layer)
    idx, lengths = _inference_batch(model, sequences)
    logits, _ = model.run(idx, lengths=lengths, intervention=intervention)
    last = torch.tensor(lengths) - 1
    return logits[torch.arange(len(lengths)), last].to(torch.float64).numpy()


@torch.no_grad()
def final_residuals_batch(model: TinyLM, sequences: Sequence[Sequence[int]], layer: int) -> np.ndarray:
    """Post-block residuals (B, d) at each sequence's last position."""
    layer = _check_layer(model, layer)
    idx, lengths = _inference_batch(model, sequences)
    _, caps = model.run(idx, lengths=lengths, capture_layers=[layer])
    last = torch.tensor(lengths) - 1
    return caps[layer][torch.arange(len(lengths)), last].to(torch.float64).numpy()


def next_token_distribution(model: TinyLM, tokens, temperature: float = 1.0) -> np.ndarray:
    logits, _ = forward(model, tokens)
    return softmax(logits[-1], temperature)


def mean_cross_entropy(model: TinyLM, corpus: Sequence[Sequence[int]], batch_size: int = 256) -> float:
    """Mean next-token cross-entropy (nats) over every predicted position."""
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(corpus), batch_size):
            idx, lengths = pad_batch(model, corpus[start : start + batch_size])
            loss_sum, n = _batch_loss(model, idx, lengths, reduction="sum")
            total += float(loss_sum)
            count += n
    return total / max(count, 1)


def _batch_loss(model: TinyLM, idx: torch.Tensor, lengths, reduction="mean"):
    logits, _ = model.run(idx, lengths=lengths)
    targets = idx[:, 1:].clone()
    valid = torch.arange(idx.shape[1] - 1)[None, :] < (torch.tensor(lengths)[:, None] - 1)
    targets[~valid] = -100
    loss = F.cross_entropy(
        logits[:, :-1].reshape(-1, logits.shape[-1]),
        targets.reshape(-1),
        ignore_index=-100,
        reduction=reduction,
    )
    return loss, int(valid.sum())


def train_lm(
    model: TinyLM,
    corpus: Sequence[Sequence[int]],
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    momentum: float = 0.0,
    log_every: int | None = None,
) -> TinyLM:
    """Minibatch SGD on next-token cross-entropy.  Mutates and returns ``model``.

    Shuffling is driven by a generator seeded from ``seed`` only, so two runs
    from identical initial weights produce bit-identical parameters.
    """
    if not corpus:
        raise InvalidArgumentError("empty corpus")
    if epochs < 0 or lr <= 0:
        raise InvalidArgumentError("epochs must be >= 0 and lr > 0")
    for seq in corpus:
        _to_tensor(model, seq)
    if epochs == 0:
        return model
    gen = torch.Generator().manual_seed(int(seed) % 2**63)
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum)
    model.train()
    step = 0
    for epoch in range(epochs):
        order = torch.randperm(len(corpus), generator=gen).tolist()
        for start in range(0, len(order), batch_size):
            batch = [corpus[i] for i in order[start : start + batch_size]]
            idx, lengths = pad_batch(model, batch)
            loss, _ = _batch_loss(model, idx, lengths)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            if log_every and step % log_every == 0:
                print(f"epoch {epoch} step {step} loss {loss.item():.4f}")
    model.eval()
    return model


def parameters_equal(a: TinyLM, b: TinyLM) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)
