"""Shared network pieces: masks, gated WaveNet stack, transformer blocks."""
from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F


def sequence_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    if max_len is None:
        max_len = int(lengths.max())
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def get_padding(kernel_size: int, dilation: int = 1) -> int:
    return (kernel_size * dilation - dilation) // 2


def init_weights(m: nn.Module, mean: float = 0.0, std: float = 0.01) -> None:
    if isinstance(m, (nn.Conv1d, nn.ConvTranspose1d, nn.Conv2d)):
        m.weight.data.normal_(mean, std)


def fused_gate(a: torch.Tensor, n_channels: int) -> torch.Tensor:
    return torch.tanh(a[:, :n_channels]) * torch.sigmoid(a[:, n_channels:])


class WN(nn.Module):
    """Non-causal gated dilated convolution stack with residual/skip paths.

    Receptive field half-width is ``sum_i dilation_rate**i * (kernel_size - 1) // 2``.
    """

    def __init__(self, hidden: int, kernel_size: int, dilation_rate: int, n_layers: int,
                 gin_channels: int = 0, p_dropout: float = 0.0):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        self.hidden = hidden
        self.n_layers = n_layers
        self.gin_channels = gin_channels
        self.drop = nn.Dropout(p_dropout)
        self.in_layers = nn.ModuleList()
        self.res_skip_layers = nn.ModuleList()
        if gin_channels:
            self.cond_layer = nn.Conv1d(gin_channels, 2 * hidden * n_layers, 1)
        self.dilations = [dilation_rate**i for i in range(n_layers)]
        for i, d in enumerate(self.dilations):
            self.in_layers.append(
                nn.Conv1d(hidden, 2 * hidden, kernel_size, dilation=d, padding=get_padding(kernel_size, d))
            )
            out = 2 * hidden if i < n_layers - 1 else hidden
            self.res_skip_layers.append(nn.Conv1d(hidden, out, 1))
        self.kernel_size = kernel_size

    @property
    def receptive_half_width(self) -> int:
        return sum(d * (self.kernel_size - 1) // 2 for d in self.dilations)

    def forward(self, x, x_mask, g=None):
        output = torch.zeros_like(x)
        if g is not None:
            g = self.cond_layer(g)
        for i in range(self.n_layers):
            x_in = self.in_layers[i](x)
            if g is not None:
                off = i * 2 * self.hidden
                x_in = x_in + g[:, off : off + 2 * self.hidden]
            acts = self.drop(fused_gate(x_in, self.hidden))
            res_skip = self.res_skip_layers[i](acts)
            if i < self.n_layers - 1:
                x = (x + res_skip[:, : self.hidden]) * x_mask
                output = output + res_skip[:, self.hidden :]
            else:
                output = output + res_skip
        return output * x_mask


class ChannelNorm(nn.LayerNorm):
    """LayerNorm over the channel axis of a (B, C, T) tensor."""

    def forward(self, x):
        return super().forward(x.transpose(1, -1)).transpose(1, -1)


def sinusoidal_positions(length: int, channels: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, channels, 2, dtype=torch.float64) * (-math.log(10000.0) / channels))
    pe = torch.zeros(length, channels, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : channels // 2]
    return pe.to(dtype)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over batch-first sequences.

    ``forward`` keeps the pre-output-projection head outputs and the
    attention probabilities on ``self.last_values`` / ``self.last_probs``
    for inspection.
    """

    def __init__(self, channels: int, n_heads: int, p_dropout: float = 0.0, zero_out: bool = False):
        super().__init__()
        if channels % n_heads:
            raise ValueError(f"channels {channels} not divisible by heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = channels // n_heads
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.o = nn.Linear(channels, channels)
        self.drop = nn.Dropout(p_dropout)
        if zero_out:
            nn.init.zeros_(self.o.weight)
            nn.init.zeros_(self.o.bias)
        self.last_values = None
        self.last_probs = None

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.d_head).transpose(1, 2)

    def probs(self, query, key, key_mask=None):
        """(B, heads, Lq, Lk) softmax weights. key_mask: (B, Lk) bool, True = valid."""
        q = self._split(self.q(query))
        k = self._split(self.k(key))
        scores = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(self.d_head)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], -1e4)
        return torch.softmax(scores, dim=-1)

    def forward(self, query, key, value, key_mask=None):
        p = self.probs(query, key, key_mask)
        v = self._split(self.v(value))
        out = torch.matmul(self.drop(p), v)
        b, _, lq, _ = out.shape
        out = out.transpose(1, 2).reshape(b, lq, -1)
        self.last_probs = p
        self.last_values = out
        return self.o(out)


class FFN(nn.Module):
    """Position-wise feed-forward; kernel_size > 1 makes it a conv over time."""

    def __init__(self, channels: int, filter_channels: int, kernel_size: int = 1, p_dropout: float = 0.0):
        super().__init__()
        self.kernel_size = kernel_size
        self.c1 = nn.Conv1d(channels, filter_channels, kernel_size, padding=kernel_size // 2)
        self.c2 = nn.Conv1d(filter_channels, channels, kernel_size, padding=kernel_size // 2)
        self.drop = nn.Dropout(p_dropout)

    def forward(self, x, mask=None):
        # x: (B, L, C); mask: (B, L) bool
        m = mask[:, None, :].to(x.dtype) if mask is not None else 1.0
        h = x.transpose(1, 2) * m
        h = self.drop(torch.relu(self.c1(h))) * m
        h = self.c2(h) * m
        return h.transpose(1, 2)


class TransformerBlock(nn.Module):
    """Post-norm attention + FFN block. Passing ``memory`` turns it into
    cross-attention: keys/values come from ``memory``, the query sequence
    keeps the residual path."""

    def __init__(self, channels: int, n_heads: int, filter_channels: int, kernel_size: int = 1,
                 p_dropout: float = 0.0, zero_out: bool = False):
        super().__init__()
        self.attn = MultiHeadAttention(channels, n_heads, p_dropout, zero_out=zero_out)
        self.norm1 = nn.LayerNorm(channels)
        self.ffn = FFN(channels, filter_channels, kernel_size, p_dropout)
        self.norm2 = nn.LayerNorm(channels)
        self.drop = nn.Dropout(p_dropout)

    def forward(self, x, mask=None, memory=None, memory_mask=None):
        if memory is None:
            memory, memory_mask = x, mask
        y = self.attn(x, memory, memory, memory_mask)
        x = self.norm1(x + self.drop(y))
        y = self.ffn(x, mask)
        x = self.norm2(x + self.drop(y))
        if mask is not None:
            x = x * mask[..., None].to(x.dtype)
        return x


class ZeroOutTransformer(nn.Module):
    """Single pre-norm block whose output projections start at zero, so that
    ``x + block(x)`` is exactly ``x`` at initialisation."""

    def __init__(self, channels: int, n_heads: int, filter_channels: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(channels)
        self.attn = MultiHeadAttention(channels, n_heads, zero_out=True)
        self.norm2 = nn.LayerNorm(channels)
        self.ffn = FFN(channels, filter_channels, 1)
        nn.init.zeros_(self.ffn.c2.weight)
        nn.init.zeros_(self.ffn.c2.bias)

    def forward(self, x, mask):
        # x: (B, C, T) channel-first, returns residual update
        h = x.transpose(1, 2)
        n = self.norm1(h)
        a = self.attn(n, n, n, mask)
        h2 = h + a
        f = self.ffn(self.norm2(h2), mask)
        return (a + f).transpose(1, 2) * mask[:, None, :].to(x.dtype)
