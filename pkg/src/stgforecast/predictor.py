"""Encoder-only Transformer with a causal convolution front end and a pooled,
non-autoregressive horizon head. Each region's series is forecast separately
with shared weights."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NonFiniteActivation, ShapeMismatch


@dataclass
class PredictorConfig:
    q: int = 90
    p: int = 1
    d_model: int = 512
    n_heads: int = 8
    n_layers: int = 6
    d_ffn: int = 2048
    dropout: float = 0.1
    conv_kernel: int = 3

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal position codes")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be odd and >= 1, got {self.conv_kernel}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.q < 1 or self.p < 1 or self.n_layers < 1:
            raise ValueError("q, p and n_layers must be >= 1")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def desk_scale(self) -> "PredictorConfig":
        """Down-scaled widths for CPU runs (same q, p, kernel, dropout)."""
        return replace(self, d_model=64, n_heads=4, n_layers=2, d_ffn=128)


# --- functional stages ----------------------------------------------------

def embed_series(x: torch.Tensor, W_E: torch.Tensor, b_E: torch.Tensor) -> torch.Tensor:
    """(..., q) or (..., q, 1) scalars -> (..., q, d) via x W_E + b_E."""
    if x.shape[-1] != 1:
        x = x.unsqueeze(-1)
    if W_E.shape[0] != 1:
        raise ShapeMismatch(f"W_E must be 1 x d, got {tuple(W_E.shape)}")
    return x @ W_E + b_E


def causal_conv(E: torch.Tensor, W_C: torch.Tensor) -> torch.Tensor:
    """Left-padded convolution over time.

    ``W_C`` has shape (k, d_in, d_out) with tap 0 the oldest, so
    C_t = sum_j E_{t-k+1+j} W_C[j] and rows before the series start are zero.
    """
    k, d_in, d_out = W_C.shape
    lead, (q, d) = E.shape[:-2], E.shape[-2:]
    if d != d_in:
        raise ShapeMismatch(f"input width {d} does not match kernel {tuple(W_C.shape)}")
    x = E.reshape(-1, q, d).transpose(1, 2)
    x = F.pad(x, (k - 1, 0))
    out = F.conv1d(x, W_C.permute(2, 1, 0))
    return out.transpose(1, 2).reshape(*lead, q, d_out)


def sinusoid_table(q: int, d_model: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(q, dtype=torch.float64)[:, None]
    freq = torch.pow(10000.0, -torch.arange(0, d_model, 2, dtype=torch.float64) / d_model)
    table = torch.empty(q, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table.to(dtype)


def positional_encoding(C: torch.Tensor) -> torch.Tensor:
    return C + sinusoid_table(C.shape[-2], C.shape[-1], C.dtype)


def attention_head(P, W_Q, W_K, W_V) -> tuple[torch.Tensor, torch.Tensor]:
    """softmax(Q K^T / sqrt(d_k)) V for one head; returns (output, attention matrix)."""
    Q, K, V = P @ W_Q, P @ W_K, P @ W_V
    logits = Q @ K.transpose(-1, -2) / math.sqrt(Q.shape[-1])
    attn = torch.softmax(logits, dim=-1)
    return attn @ V, attn


def global_pool(H: torch.Tensor) -> torch.Tensor:
    return H.mean(dim=-2)


# --- modules --------------------------------------------------------------

class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.W_Q = nn.Linear(d_model, d_model, bias=False)
        self.W_K = nn.Linear(d_model, d_model, bias=False)
        self.W_V = nn.Linear(d_model, d_model, bias=False)
        self.W_O = nn.Linear(d_model, d_model, bias=False)

    def head_weights(self, j: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(W_Q, W_K, W_V) of head j as d_model x d_k matrices."""
        d_k = self.W_Q.out_features // self.n_heads
        cols = slice(j * d_k, (j + 1) * d_k)
        return tuple(lin.weight[cols].T for lin in (self.W_Q, self.W_K, self.W_V))

    def forward(self, P: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # all heads at once; same result as attention_head on each head_weights(j)
        h = self.n_heads
        lead, q = P.shape[:-2], P.shape[-2]

        def split(x):
            return x.reshape(*lead, q, h, -1).transpose(-2, -3)

        Q, K, V = split(self.W_Q(P)), split(self.W_K(P)), split(self.W_V(P))
        attn = torch.softmax(Q @ K.transpose(-1, -2) / math.sqrt(Q.shape[-1]), dim=-1)
        out = (attn @ V).transpose(-2, -3).reshape(*lead, q, -1)
        return self.W_O(out), attn


class EncoderLayer(nn.Module):
    """Post-norm block: attention, add & norm, feed-forward, add & norm.

    Dropout acts on the two residual branches.
    """

    def __init__(self, d_model: int, n_heads: int, d_ffn: int, dropout: float):
        super().__init__()
        self.attn = MultiHeadSelfAttention(d_model, n_heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(nn.Linear(d_model, d_ffn), nn.ReLU(), nn.Linear(d_ffn, d_model))
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, P):
        a, attn = self.attn(P)
        x = self.norm1(P + self.dropout(a))
        return self.norm2(x + self.dropout(self.ffn(x))), attn


class Encoder(nn.Module):
    def __init__(self, config: PredictorConfig):
        super().__init__()
        self.layers = nn.ModuleList(
            EncoderLayer(config.d_model, config.n_heads, config.d_ffn, config.dropout)
            for _ in range(config.n_layers))

    def forward(self, P):
        maps = []
        for layer in self.layers:
            P, attn = layer(P)
            maps.append(attn)
        if not torch.isfinite(P).all():
            raise NonFiniteActivation("encoder produced non-finite activations")
        return P, maps


def encoder_forward(P: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    return encoder(P)[0]


class Predictor(nn.Module):
    """embed -> causal conv -> position codes -> encoder -> mean pool -> FFN -> p outputs."""

    def __init__(self, config: PredictorConfig):
        super().__init__()
        self.config = config
        d, k = config.d_model, config.conv_kernel
        self.W_E = nn.Parameter(torch.empty(1, d))
        self.b_E = nn.Parameter(torch.zeros(d))
        self.W_C = nn.Parameter(torch.empty(k, d, d))
        self.encoder = Encoder(config)
        self.head = nn.Sequential(nn.Linear(d, config.d_ffn), nn.ReLU(), nn.Linear(config.d_ffn, d))
        self.out = nn.Linear(d, config.p)
        nn.init.normal_(self.W_E, std=1.0)
        bound = 1.0 / math.sqrt(k * d)
        nn.init.uniform_(self.W_C, -bound, bound)

    def forward(self, x: torch.Tensor, return_attention: bool = False):
        """x: (..., q) or (..., q, 1) scaled history -> (..., p)."""
        if x.shape[-1] == 1 and x.dim() >= 2 and x.shape[-2] == self.config.q:
            x = x.squeeze(-1)
        if x.shape[-1] != self.config.q:
            raise ShapeMismatch(f"expected history length {self.config.q}, got {tuple(x.shape)}")
        P = positional_encoding(causal_conv(embed_series(x, self.W_E, self.b_E), self.W_C))
        H, maps = self.encoder(P)
        y = self.out(self.head(global_pool(H)))
        return (y, maps) if return_attention else y


def forecast(x, predictor: Predictor) -> torch.Tensor:
    """Forecast p steps from a single (q,) / (q, 1) history or a (B, q) batch."""
    x = torch.as_tensor(x, dtype=next(predictor.parameters()).dtype)
    return predictor(x)


def forecast_regions(windows: torch.Tensor, predictor: Predictor) -> torch.Tensor:
    """(..., q, N) multi-region histories -> (..., p, N), one encoder pass per call."""
    x = windows.transpose(-1, -2)
    return predictor(x).transpose(-1, -2)
