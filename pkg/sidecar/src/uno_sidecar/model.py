"""Toy character-level causal language model with low-rank adapters.

The base model is a deterministic random-initialized transformer (well
under a million parameters), frozen for the lifetime of the service; all
training happens in low-rank adapter deltas layered on top.  That keeps
the reference policy fixed for preference training and makes checkpoints
nothing more than adapter state dicts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

PAD, BOS, EOS, UNK = 0, 1, 2, 3
_SPECIALS = 4
_CHARS = (
    "\n !\"#$%&'()*+,-./0123456789:;<=>?@ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    "[\\]^_`abcdefghijklmnopqrstuvwxyz{|}~"
)
CHAR_TO_ID = {c: i + _SPECIALS for i, c in enumerate(_CHARS)}
VOCAB_SIZE = _SPECIALS + len(_CHARS)


def encode(text: str) -> list[int]:
    return [CHAR_TO_ID.get(c, UNK) for c in text]


def decode(ids: list[int]) -> str:
    out = []
    for i in ids:
        if i >= _SPECIALS:
            out.append(_CHARS[i - _SPECIALS])
    return "".join(out)


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context: int = 256
    vocab: int = VOCAB_SIZE


class LoRALinear(nn.Module):
    """Frozen base linear plus an optional trainable low-rank delta."""

    def __init__(self, base: nn.Linear):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.lora_a: Optional[nn.Parameter] = None
        self.lora_b: Optional[nn.Parameter] = None
        self.scale = 1.0
        self.dropout = nn.Dropout(0.0)

    @property
    def effective_rank(self) -> int:
        return 0 if self.lora_a is None else self.lora_a.shape[0]

    def attach_adapter(self, rank: int, dropout: float, generator: torch.Generator) -> int:
        out_f, in_f = self.base.weight.shape
        r = max(1, min(rank, in_f, out_f))
        a = torch.empty(r, in_f)
        a.uniform_(-1 / math.sqrt(in_f), 1 / math.sqrt(in_f), generator=generator)
        self.lora_a = nn.Parameter(a)
        self.lora_b = nn.Parameter(torch.zeros(out_f, r))
        self.scale = 1.0 / r
        self.dropout = nn.Dropout(dropout)
        return r

    def detach_adapter(self) -> None:
        self.lora_a = None
        self.lora_b = None
        self.dropout = nn.Dropout(0.0)

    def adapter_state(self) -> dict:
        return {"a": self.lora_a.detach().clone(), "b": self.lora_b.detach().clone()}

    def load_adapter_state(self, state: dict) -> None:
        self.lora_a = nn.Parameter(state["a"].clone())
        self.lora_b = nn.Parameter(state["b"].clone())
        self.scale = 1.0 / self.lora_a.shape[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.base(x)
        if self.lora_a is not None:
            y = y + self.dropout(x) @ self.lora_a.T @ self.lora_b.T * self.scale
        return y


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.qkv = LoRALinear(nn.Linear(cfg.dim, 3 * cfg.dim))
        self.proj = LoRALinear(nn.Linear(cfg.dim, cfg.dim))
        self.fc1 = LoRALinear(nn.Linear(cfg.dim, 4 * cfg.dim))
        self.fc2 = LoRALinear(nn.Linear(4 * cfg.dim, cfg.dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).split(d, dim=2)
        shape = (b, t, self.n_heads, d // self.n_heads)
        q, k, v = (z.view(shape).transpose(1, 2) for z in (q, k, v))
        attn = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        attn = attn.transpose(1, 2).contiguous().view(b, t, d)
        x = x + self.proj(attn)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x


class TinyCharLM(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab, cfg.dim)
        self.pos_emb = nn.Embedding(cfg.context, cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.head = LoRALinear(nn.Linear(cfg.dim, cfg.vocab, bias=False))
        for p in self.parameters():
            p.requires_grad_(False)

    def lora_layers(self) -> list[LoRALinear]:
        layers = []
        for block in self.blocks:
            layers.extend([block.qkv, block.proj, block.fc1, block.fc2])
        layers.append(self.head)
        return layers

    def attach_adapter(self, rank: int, dropout: float, seed: int) -> int:
        gen = torch.Generator().manual_seed(seed)
        ranks = [layer.attach_adapter(rank, dropout, gen) for layer in self.lora_layers()]
        return max(ranks)

    def detach_adapter(self) -> None:
        for layer in self.lora_layers():
            layer.detach_adapter()

    def adapter_parameters(self) -> list[nn.Parameter]:
        params = []
        for layer in self.lora_layers():
            if layer.lora_a is not None:
                params.extend([layer.lora_a, layer.lora_b])
        return params

    def adapter_state(self) -> list[dict]:
        return [layer.adapter_state() for layer in self.lora_layers()]

    def load_adapter_state(self, state: list[dict]) -> None:
        for layer, layer_state in zip(self.lora_layers(), state):
            layer.load_adapter_state(layer_state)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        b, t = ids.shape
        pos = torch.arange(t, device=ids.device).unsqueeze(0)
        x = self.tok_emb(ids) + self.pos_emb(pos)
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))

    # -- sequence scoring and generation

    def sequence_logprob(self, prompt_ids: list[int], target_ids: list[int]) -> torch.Tensor:
        """Sum log-probability of the target continuation given the prompt
        (differentiable when adapters are attached)."""
        ids = [BOS] + prompt_ids + target_ids + [EOS]
        ids = ids[-self.cfg.context :]
        n_target = min(len(target_ids) + 1, len(ids) - 1)  # target chars + EOS
        x = torch.tensor([ids], dtype=torch.long)
        logits = self.forward(x[:, :-1])
        logprobs = F.log_softmax(logits, dim=-1)
        targets = x[:, 1:]
        token_lp = logprobs.gather(2, targets.unsqueeze(-1)).squeeze(-1)[0]
        return token_lp[-n_target:].sum()

    @torch.no_grad()
    def generate(self, prompt: str, max_new: int, temperature: float, seed: int = 0) -> str:
        ids = [BOS] + encode(prompt)
        ids = ids[-(self.cfg.context - max_new - 1) :]
        gen = torch.Generator().manual_seed(seed)
        out: list[int] = []
        for step in range(max_new):
            x = torch.tensor([ids + out], dtype=torch.long)
            logits = self.forward(x)[0, -1].clone()
            logits[PAD] = logits[BOS] = logits[UNK] = -math.inf
            if step == 0:
                logits[EOS] = -math.inf  # generation is always non-empty
            if temperature < 0.05:
                nxt = int(torch.argmax(logits))
            else:
                probs = F.softmax(logits / temperature, dim=-1)
                nxt = int(torch.multinomial(probs, 1, generator=gen))
            if nxt == EOS:
                break
            out.append(nxt)
            if len(ids) + len(out) >= self.cfg.context:
                break
        return decode(out)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
