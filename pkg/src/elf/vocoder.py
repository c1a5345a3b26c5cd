"""Upsampling waveform generator, multi-period / multi-scale discriminators
and the least-squares adversarial and feature-matching losses."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F
from torch.nn.utils.parametrizations import weight_norm

from .modules import get_padding, init_weights

LRELU_SLOPE = 0.1


@dataclass
class DecoderConfig:
    upsample_initial_channel: int = 512
    upsample_factors: list[int] = field(default_factory=lambda: [8, 8, 4, 4])
    upsample_kernels: list[int] = field(default_factory=lambda: [16, 16, 8, 8])
    resblock_kernels: list[int] = field(default_factory=lambda: [3, 7, 11])
    resblock_dilations: list[list[int]] = field(default_factory=lambda: [[1, 3, 5], [1, 3, 5], [1, 3, 5]])

    def __post_init__(self):
        if len(self.upsample_factors) != len(self.upsample_kernels):
            raise ValueError("upsample_factors and upsample_kernels differ in length")
        for u, k in zip(self.upsample_factors, self.upsample_kernels):
            if k < u or (k - u) % 2:
                raise ValueError(f"kernel {k} incompatible with factor {u} (need k >= u, k - u even)")
        if len(self.resblock_kernels) != len(self.resblock_dilations):
            raise ValueError("resblock_kernels and resblock_dilations differ in length")

    @property
    def hop(self) -> int:
        out = 1
        for u in self.upsample_factors:
            out *= u
        return out


@dataclass
class DiscriminatorConfig:
    periods: list[int] = field(default_factory=lambda: [2, 3, 5, 7, 11])
    n_scales: int = 3
    period_channels: list[int] = field(default_factory=lambda: [32, 128, 512, 1024])
    scale_channels: list[int] = field(default_factory=lambda: [16, 64, 256, 1024])


class ResBlock(nn.Module):
    def __init__(self, channels: int, kernel_size: int, dilations):
        super().__init__()
        self.convs1 = nn.ModuleList(
            weight_norm(nn.Conv1d(channels, channels, kernel_size, dilation=d, padding=get_padding(kernel_size, d)))
            for d in dilations
        )
        self.convs2 = nn.ModuleList(
            weight_norm(nn.Conv1d(channels, channels, kernel_size, padding=get_padding(kernel_size)))
            for _ in dilations
        )
        self.convs1.apply(init_weights)
        self.convs2.apply(init_weights)

    def forward(self, x):
        for c1, c2 in zip(self.convs1, self.convs2):
            xt = c2(F.leaky_relu(c1(F.leaky_relu(x, LRELU_SLOPE)), LRELU_SLOPE))
            x = x + xt
        return x


class Generator(nn.Module):
    """Transposed-conv upsampler with multi-receptive-field residual stages.

    ``stage_prefixes(i)`` names the parameters that make up upsampling stage
    ``i`` (the transposed conv plus its residual blocks).
    """

    def __init__(self, in_channels: int, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.num_kernels = len(cfg.resblock_kernels)
        c0 = cfg.upsample_initial_channel
        self.conv_pre = weight_norm(nn.Conv1d(in_channels, c0, 7, padding=3))
        self.ups = nn.ModuleList()
        self.resblocks = nn.ModuleList()
        ch = c0
        for u, k in zip(cfg.upsample_factors, cfg.upsample_kernels):
            out = max(ch // 2, 1)
            self.ups.append(weight_norm(nn.ConvTranspose1d(ch, out, k, u, padding=(k - u) // 2)))
            for rk, rd in zip(cfg.resblock_kernels, cfg.resblock_dilations):
                self.resblocks.append(ResBlock(out, rk, rd))
            ch = out
        self.conv_post = weight_norm(nn.Conv1d(ch, 1, 7, padding=3))
        self.ups.apply(init_weights)

    def stage_prefixes(self, i: int) -> list[str]:
        nk = self.num_kernels
        return [f"ups.{i}."] + [f"resblocks.{j}." for j in range(i * nk, (i + 1) * nk)]

    def forward(self, x):
        x = self.conv_pre(x)
        for i, up in enumerate(self.ups):
            x = up(F.leaky_relu(x, LRELU_SLOPE))
            xs = 0
            for j in range(self.num_kernels):
                xs = xs + self.resblocks[i * self.num_kernels + j](x)
            x = xs / self.num_kernels
        x = self.conv_post(F.leaky_relu(x))
        return torch.tanh(x)


class PeriodDiscriminator(nn.Module):
    def __init__(self, period: int, channels, kernel_size: int = 5, stride: int = 3):
        super().__init__()
        self.period = period
        chans = [1] + list(channels)
        self.convs = nn.ModuleList(
            weight_norm(nn.Conv2d(chans[i], chans[i + 1], (kernel_size, 1), (stride, 1),
                                  padding=(get_padding(kernel_size), 0)))
            for i in range(len(channels))
        )
        self.convs.append(weight_norm(nn.Conv2d(chans[-1], chans[-1], (kernel_size, 1), 1, padding=(2, 0))))
        self.conv_post = weight_norm(nn.Conv2d(chans[-1], 1, (3, 1), 1, padding=(1, 0)))

    def forward(self, x):
        fmap = []
        b, c, t = x.shape
        if t % self.period:
            n_pad = self.period - (t % self.period)
            x = F.pad(x, (0, n_pad), "reflect" if n_pad < t else "constant")
            t = t + n_pad
        x = x.view(b, c, t // self.period, self.period)
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            fmap.append(x)
        x = self.conv_post(x)
        fmap.append(x)
        return torch.flatten(x, 1, -1), fmap


class ScaleDiscriminator(nn.Module):
    def __init__(self, channels):
        super().__init__()
        chans = [1] + list(channels)
        layers = [weight_norm(nn.Conv1d(1, chans[1], 15, 1, padding=7))]
        for i in range(1, len(channels)):
            groups = max(1, min(chans[i], chans[i + 1]) // 4)
            while chans[i] % groups or chans[i + 1] % groups:
                groups -= 1
            layers.append(weight_norm(nn.Conv1d(chans[i], chans[i + 1], 41, 4, groups=groups, padding=20)))
        layers.append(weight_norm(nn.Conv1d(chans[-1], chans[-1], 5, 1, padding=2)))
        self.convs = nn.ModuleList(layers)
        self.conv_post = weight_norm(nn.Conv1d(chans[-1], 1, 3, 1, padding=1))

    def forward(self, x):
        fmap = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            fmap.append(x)
        x = self.conv_post(x)
        fmap.append(x)
        return torch.flatten(x, 1, -1), fmap


class MultiDiscriminator(nn.Module):
    """Period sub-discriminators followed by scale sub-discriminators on
    successively 2x average-pooled audio."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.period_discs = nn.ModuleList(PeriodDiscriminator(p, cfg.period_channels) for p in cfg.periods)
        self.scale_discs = nn.ModuleList(ScaleDiscriminator(cfg.scale_channels) for _ in range(cfg.n_scales))
        self.pool = nn.AvgPool1d(4, 2, padding=2)

    def forward(self, y):
        """y: (B, 1, N) -> (list of logits, list of per-sub-discriminator feature lists)."""
        outs, fmaps = [], []
        for d in self.period_discs:
            o, f = d(y)
            outs.append(o)
            fmaps.append(f)
        x = y
        for i, d in enumerate(self.scale_discs):
            if i > 0:
                x = self.pool(x)
            o, f = d(x)
            outs.append(o)
            fmaps.append(f)
        return outs, fmaps


# ---------------------------------------------------------------------------
# Losses (least-squares GAN + feature matching)


def discriminator_loss(d_real, d_fake) -> torch.Tensor:
    """Sum over sub-discriminators of mean (D(y) - 1)^2 + mean D(G(s))^2."""
    if len(d_real) != len(d_fake):
        raise ValueError("real/fake output lists differ in length")
    loss = 0.0
    for dr, dg in zip(d_real, d_fake):
        dr = torch.as_tensor(dr, dtype=torch.float64) if not torch.is_tensor(dr) else dr
        dg = torch.as_tensor(dg, dtype=torch.float64) if not torch.is_tensor(dg) else dg
        loss = loss + torch.mean((dr - 1) ** 2) + torch.mean(dg**2)
    return loss / len(d_real)


def generator_adversarial_loss(d_fake) -> torch.Tensor:
    loss = 0.0
    for dg in d_fake:
        dg = torch.as_tensor(dg, dtype=torch.float64) if not torch.is_tensor(dg) else dg
        loss = loss + torch.mean((dg - 1) ** 2)
    return loss / len(d_fake)


def feature_matching_loss(feat_real, feat_fake) -> torch.Tensor:
    """Sum over all discriminator layers of the per-feature mean |D_l(y) - D_l(G(s))|."""
    if len(feat_real) != len(feat_fake):
        raise ValueError("feature lists are not layer-aligned")
    loss = 0.0
    for fr_list, fg_list in zip(feat_real, feat_fake):
        if len(fr_list) != len(fg_list):
            raise ValueError("feature lists are not layer-aligned")
        for fr, fg in zip(fr_list, fg_list):
            if fr.shape != fg.shape:
                raise ValueError(f"feature shape mismatch {tuple(fr.shape)} vs {tuple(fg.shape)}")
            loss = loss + torch.mean(torch.abs(fr.detach() - fg))
    return loss
