"""Affine coupling flows whose coupling networks carry a small residual
transformer block for long-range context."""
from __future__ import annotations

import torch
from torch import nn

from .modules import WN, ZeroOutTransformer


class FlowConfigError(ValueError):
    pass


class TransformerCoupling(nn.Module):
    """x = [xa, xb]; xb <- xb * exp(logs(xa)) + m(xa).

    Context for (m, logs) is WN(pre(xa)) plus a zero-initialised transformer
    residual. The final projection is zero-initialised, so a fresh layer is
    the identity with log-determinant 0.
    """

    def __init__(self, channels: int, hidden: int, kernel_size: int, n_layers: int,
                 n_heads: int = 2, filter_channels: int | None = None, gin_channels: int = 0):
        super().__init__()
        if channels % 2:
            raise FlowConfigError(f"coupling needs an even channel count, got {channels}")
        self.half = channels // 2
        self.pre = nn.Conv1d(self.half, hidden, 1)
        self.enc = WN(hidden, kernel_size, 1, n_layers, gin_channels=gin_channels)
        self.attn = ZeroOutTransformer(hidden, n_heads, filter_channels or hidden)
        self.post = nn.Conv1d(hidden, 2 * self.half, 1)
        nn.init.zeros_(self.post.weight)
        nn.init.zeros_(self.post.bias)

    def _stats(self, xa, mask, g):
        m_bool = mask[:, 0] > 0
        h = self.pre(xa) * mask
        h = self.enc(h, mask, g=g)
        h = h + self.attn(h, m_bool)
        stats = self.post(h) * mask
        m, logs = torch.split(stats, self.half, dim=1)
        return m, logs

    def forward(self, x, mask, g=None, reverse: bool = False):
        xa, xb = torch.split(x, self.half, dim=1)
        m, logs = self._stats(xa, mask, g)
        if not reverse:
            xb = (m + xb * torch.exp(logs)) * mask
            logdet = torch.sum(logs * mask, dim=(1, 2))
            return torch.cat([xa, xb], 1), logdet
        xb = (xb - m) * torch.exp(-logs) * mask
        return torch.cat([xa, xb], 1), None


class Flip(nn.Module):
    def forward(self, x, mask, g=None, reverse: bool = False):
        x = torch.flip(x, [1])
        if not reverse:
            return x, torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
        return x, None


class FlowStack(nn.Module):
    def __init__(self, channels: int, hidden: int, kernel_size: int, n_layers: int, n_blocks: int,
                 n_heads: int = 2, filter_channels: int | None = None, gin_channels: int = 0):
        super().__init__()
        if channels % 2:
            raise FlowConfigError(f"flow channel count must be even, got {channels}")
        self.flows = nn.ModuleList()
        for _ in range(n_blocks):
            self.flows.append(TransformerCoupling(channels, hidden, kernel_size, n_layers, n_heads,
                                                  filter_channels, gin_channels))
            self.flows.append(Flip())

    def forward(self, z, mask, g=None):
        """z: (B, C, T) -> (f(z), log|det J|) with log-det per batch item."""
        logdet = torch.zeros(z.shape[0], dtype=z.dtype, device=z.device)
        for f in self.flows:
            z, ld = f(z, mask, g=g)
            logdet = logdet + ld
        return z, logdet

    def inverse(self, z, mask, g=None):
        for f in reversed(self.flows):
            z, _ = f(z, mask, g=g, reverse=True)
        return z


def flow_forward(flow: FlowStack, z, cond=None):
    """Time-major convenience: z (T, C) -> (f(z) (T, C), scalar log-det)."""
    x = z.T[None]
    mask = torch.ones_like(x[:, :1])
    y, ld = flow(x, mask, g=cond)
    return y[0].T, ld[0]


def flow_inverse(flow: FlowStack, z, cond=None):
    x = z.T[None]
    mask = torch.ones_like(x[:, :1])
    return flow.inverse(x, mask, g=cond)[0].T
