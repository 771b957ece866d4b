"""Tiny query decoder with group-isolating self-attention.

Two query groups run through the same decoder blocks: the main group (the
one that is matched one-to-one and kept at inference) and an optional
auxiliary group for one-to-many supervision. Self-attention between groups
is blocked with additive ``-inf`` logits, so main-group outputs never depend
on the auxiliary queries. Everything is float64.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from ..errors import ConfigError
from ..losses import LossGradients
from ..matching import SHARING, LayerPredictions

DTYPE = torch.float64
PRIOR_PROB = 0.01


def build_group_mask(n: int, T: int) -> np.ndarray:
    """Boolean ``(n+T, n+T)`` permit matrix, block-diagonal over the two groups."""
    if n < 1 or T < 0:
        raise ConfigError("need n >= 1 and T >= 0")
    group = np.r_[np.zeros(n, dtype=np.int8), np.ones(T, dtype=np.int8)]
    return group[:, None] == group[None, :]


def additive_mask(permit: np.ndarray) -> torch.Tensor:
    out = torch.zeros(permit.shape, dtype=DTYPE)
    out[~torch.from_numpy(permit)] = -math.inf
    return out


class _Init:
    """Draws parameters from a dedicated torch generator."""

    def __init__(self, seed: int):
        self.gen = torch.Generator().manual_seed(int(seed) % (2**63))

    def normal(self, *shape, std: float) -> nn.Parameter:
        return nn.Parameter(torch.randn(*shape, generator=self.gen, dtype=DTYPE) * std)

    def linear(self, fan_in: int, fan_out: int) -> tuple[nn.Parameter, nn.Parameter]:
        bound = 1.0 / math.sqrt(fan_in)
        w = (torch.rand(fan_in, fan_out, generator=self.gen, dtype=DTYPE) * 2 - 1) * bound
        return nn.Parameter(w), nn.Parameter(torch.zeros(fan_out, dtype=DTYPE))


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(-1, keepdim=True)
        var = ((x - mu) ** 2).mean(-1, keepdim=True)
        return (x - mu) / torch.sqrt(var + self.eps) * self.weight + self.bias


class Attention(nn.Module):
    def __init__(self, d: int, heads: int, init: _Init):
        super().__init__()
        if d % heads:
            raise ConfigError(f"d={d} not divisible by heads={heads}")
        self.heads = heads
        self.scale = 1.0 / math.sqrt(d // heads)
        self.wq, self.bq = init.linear(d, d)
        self.wk, self.bk = init.linear(d, d)
        self.wv, self.bv = init.linear(d, d)
        self.wo, self.bo = init.linear(d, d)

    def _split(self, x):
        B, N, d = x.shape
        return x.reshape(B, N, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x, mem, bias):
        """``bias`` is additive on the logits, broadcastable to (B, heads, Nq, Nk)."""
        q = self._split((x @ self.wq + self.bq) * self.scale)
        k = self._split(mem @ self.wk + self.bk)
        v = self._split(mem @ self.wv + self.bv)
        logits = q @ k.transpose(-1, -2) + bias
        attn = torch.softmax(logits, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(x.shape)
        return out @ self.wo + self.bo


class Block(nn.Module):
    def __init__(self, d: int, heads: int, ffn: int, init: _Init):
        super().__init__()
        self.ln_self = LayerNorm(d)
        self.self_attn = Attention(d, heads, init)
        self.ln_cross = LayerNorm(d)
        self.cross_attn = Attention(d, heads, init)
        self.ln_ffn = LayerNorm(d)
        self.w1, self.b1 = init.linear(d, ffn)
        self.w2, self.b2 = init.linear(ffn, d)

    def forward(self, x, mem, self_bias, mem_bias):
        h = self.ln_self(x)
        x = x + self.self_attn(h, h, self_bias)
        x = x + self.cross_attn(self.ln_cross(x), mem, mem_bias)
        h = torch.nn.functional.gelu(self.ln_ffn(x) @ self.w1 + self.b1, approximate="tanh")
        return x + h @ self.w2 + self.b2


class Head(nn.Module):
    """Class probabilities via sigmoid; boxes squashed into (0, 1)^4."""

    def __init__(self, d: int, C: int, init: _Init):
        super().__init__()
        self.ln = LayerNorm(d)
        self.wc, self.bc = init.linear(d, C)
        with torch.no_grad():
            self.bc.fill_(-math.log((1 - PRIOR_PROB) / PRIOR_PROB))
        self.wb1, self.bb1 = init.linear(d, d)
        self.wb2, self.bb2 = init.linear(d, 4)

    def forward(self, x):
        h = self.ln(x)
        scores = torch.sigmoid(h @ self.wc + self.bc)
        hb = torch.nn.functional.gelu(h @ self.wb1 + self.bb1, approximate="tanh")
        boxes = torch.sigmoid(hb @ self.wb2 + self.bb2)
        return scores, boxes


class ToyDecoder(nn.Module):
    """Query decoder over scene tokens.

    ``sharing`` selects what the auxiliary group reuses: ``"all"`` shares
    decoder blocks and heads, ``"heads_unshared"`` gives it its own heads,
    ``"decoder_unshared"`` its own blocks and heads. Main-group parameters
    are drawn from ``seed`` alone, so they do not depend on ``T`` or ``sharing``.
    """

    def __init__(self, d: int = 32, C: int = 5, n: int = 30, T: int = 0, L: int = 2, heads: int = 4,
                 ffn: int = 64, sharing: str = "all", seed: int = 0):
        super().__init__()
        if sharing not in SHARING:
            raise ConfigError(f"unknown sharing {sharing!r}")
        if n < 1 or T < 0 or L < 1:
            raise ConfigError("need n >= 1, T >= 0, L >= 1")
        self.d, self.C, self.n, self.T, self.L = d, C, n, T, L
        self.sharing = sharing
        seeds = np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64)
        main, aux = _Init(int(seeds[0])), _Init(int(seeds[1]))

        self.tok_w, self.tok_b = main.linear(d, d)
        self.ln_mem = LayerNorm(d)
        self.queries = main.normal(n, d, std=1.0)
        self.blocks = nn.ModuleList(Block(d, heads, ffn, main) for _ in range(L))
        self.head = Head(d, C, main)

        self.aux_queries = aux.normal(T, d, std=1.0) if T else None
        self.aux_blocks = None
        self.aux_head = None
        if T and sharing in ("heads_unshared", "decoder_unshared"):
            self.aux_head = Head(d, C, aux)
        if T and sharing == "decoder_unshared":
            self.aux_blocks = nn.ModuleList(Block(d, heads, ffn, aux) for _ in range(L))
        self.register_buffer("self_bias", additive_mask(build_group_mask(n, T)), persistent=False)

    def _memory(self, tokens, token_valid):
        mem = self.ln_mem(tokens @ self.tok_w + self.tok_b)
        mem_bias = torch.zeros(token_valid.shape, dtype=DTYPE)
        mem_bias[~token_valid] = -math.inf
        return mem, mem_bias[:, None, None, :]

    def run(self, tokens: torch.Tensor, token_valid: torch.Tensor,
            aux_queries: Optional[torch.Tensor] = None, joint: bool = False) -> dict:
        """Batched forward. Returns ``{"main": [(scores, boxes)] * L, "aux": [...]}``.

        ``aux_queries`` overrides the learned auxiliary embeddings (used to
        probe isolation); its row count may differ from ``T``.

        By default each group runs through the blocks on its own. Under the
        block-diagonal mask the masked logits contribute exact zeros, so this
        is the masked computation with those zeros skipped; it keeps every
        reduction seen by the main group independent of the auxiliary group,
        which makes isolation bitwise. ``joint=True`` evaluates the single
        concatenated pass with additive ``-inf`` logits instead (same values
        up to summation order).
        """
        B = tokens.shape[0]
        mem, mem_bias = self._memory(tokens, token_valid)
        aux_q = self.aux_queries if aux_queries is None else aux_queries
        T = 0 if aux_q is None else aux_q.shape[0]
        n = self.n
        out = {"main": [], "aux": []}
        aux_head = self.aux_head or self.head
        zero = torch.zeros((), dtype=DTYPE)

        if joint and T and self.aux_blocks is None:
            x = torch.cat([self.queries, aux_q], dim=0).expand(B, -1, -1)
            bias = self.self_bias if T == self.T else additive_mask(build_group_mask(n, T))
            for blk in self.blocks:
                x = blk(x, mem, bias, mem_bias)
                out["main"].append(self.head(x[:, :n]))
                out["aux"].append(aux_head(x[:, n:]))
            return out

        x = self.queries.expand(B, -1, -1)
        y = aux_q.expand(B, -1, -1) if T else None
        aux_blocks = self.aux_blocks if self.aux_blocks is not None else self.blocks
        for blk, ablk in zip(self.blocks, aux_blocks):
            x = blk(x, mem, zero, mem_bias)
            out["main"].append(self.head(x))
            if T:
                y = ablk(y, mem, zero, mem_bias)
                out["aux"].append(aux_head(y))
        return out


def collate(scenes: Sequence) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad scene tokens into ``(B, S_max, d)`` with a validity mask."""
    S = max(len(s.tokens) for s in scenes)
    d = scenes[0].tokens.shape[1]
    tokens = np.zeros((len(scenes), S, d))
    valid = np.zeros((len(scenes), S), dtype=bool)
    for i, s in enumerate(scenes):
        tokens[i, : len(s.tokens)] = s.tokens
        valid[i, : len(s.tokens)] = True
    return torch.from_numpy(tokens), torch.from_numpy(valid)


def to_layer_predictions(outputs: dict, index: int = 0) -> dict:
    """Numpy :class:`LayerPredictions` per group for batch element ``index``."""
    return {
        g: [LayerPredictions(s[index].detach().numpy().copy(), b[index].detach().numpy().copy(), layer_index=l)
            for l, (s, b) in enumerate(layers)]
        for g, layers in outputs.items()
    }


def forward(model: ToyDecoder, scene) -> tuple[list, list]:
    """Per-layer predictions for the main group and for the auxiliary group."""
    if scene.tokens.shape[1] != model.d:
        raise ConfigError(f"scene tokens have dimension {scene.tokens.shape[1]}, model expects {model.d}")
    tokens, valid = collate([scene])
    with torch.no_grad():
        preds = to_layer_predictions(model.run(tokens, valid))
    return preds["main"], preds["aux"]


def upstream_pairs(outputs: dict, upstream: Sequence[dict]):
    """Flatten model outputs and per-scene loss gradients into autograd inputs."""
    tensors, grads = [], []
    for group, layers in outputs.items():
        for l, (s, b) in enumerate(layers):
            gs = np.stack([u[group][l].d_scores if group in u else np.zeros(s.shape[1:]) for u in upstream])
            gb = np.stack([u[group][l].d_boxes if group in u else np.zeros(b.shape[1:]) for u in upstream])
            tensors += [s, b]
            grads += [torch.from_numpy(gs), torch.from_numpy(gb)]
    return tensors, grads


def backward(model: ToyDecoder, scene, upstream: dict) -> dict:
    """Parameter gradients of ``sum <upstream, outputs>`` for one scene.

    ``upstream`` maps ``"main"``/``"aux"`` to one :class:`LossGradients` per layer.
    """
    tokens, valid = collate([scene])
    outputs = model.run(tokens, valid)
    tensors, grads = upstream_pairs(outputs, [upstream])
    params = [p for p in model.parameters()]
    gs = torch.autograd.grad(tensors, params, grads, allow_unused=True)
    return {
        name: (np.zeros(p.shape) if g is None else g.detach().numpy().copy())
        for (name, p), g in zip(model.named_parameters(), gs)
    }


__all__ = [
    "LossGradients",
    "ToyDecoder",
    "additive_mask",
    "backward",
    "build_group_mask",
    "collate",
    "forward",
    "to_layer_predictions",
]
