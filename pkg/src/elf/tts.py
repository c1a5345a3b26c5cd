"""Text-to-speech conditioned on a speaker codebook.

The prior encoder runs the first ``fusion_layer_index`` text layers, fuses
the codebook (via a positional-encoding-free transformer over codebook rows,
then cross-attention from the text features) and runs the remaining layers.
Posterior latents from the mel are mapped by a coupling flow onto the
text-side prior; monotonic alignment search supplies the alignment and the
log-durations that train an adversarial duration generator.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .alignment import batch_mas
from .audio import MelExtractor, Waveform
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .codebook import SpeakerCodebook
from .config import PipelineConfig, TtsConfig, FtsConfig, from_dict
from .flows import FlowStack
from .modules import WN, ChannelNorm, TransformerBlock, sequence_mask, sinusoidal_positions
from .text import PhonemeSequence, TextError, Tokenizer
from .training import (
    LossLog,
    check_finite,
    load_module_tensors,
    load_optimizer_tensors,
    lr_at_epoch,
    make_optimizer,
    module_tensors,
    optimizer_tensors,
    restore_rng_state,
    rng_state,
    set_lr,
)
from .vocoder import (
    Generator,
    MultiDiscriminator,
    discriminator_loss,
    feature_matching_loss,
    generator_adversarial_loss,
)

log = logging.getLogger(__name__)


class TtsConfigError(ValueError):
    pass


class ParameterMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Prior encoder with codebook fusion


def pad_codebooks(codebooks, dtype=torch.float32):
    """List of (K_i, H) arrays/tensors -> (B, K_max, H) tensor and (B, K_max) bool mask."""
    mats = [cb.tensor(dtype) if isinstance(cb, SpeakerCodebook) else torch.as_tensor(cb, dtype=dtype)
            for cb in codebooks]
    H = mats[0].shape[1]
    if any(m.shape[1] != H for m in mats):
        raise TtsConfigError("codebooks in one batch have different latent dims")
    k_max = max(m.shape[0] for m in mats)
    out = torch.zeros(len(mats), k_max, H, dtype=dtype)
    mask = torch.zeros(len(mats), k_max, dtype=torch.bool)
    for i, m in enumerate(mats):
        out[i, : len(m)] = m
        mask[i, : len(m)] = True
    return out, mask


class CodebookEncoder(nn.Module):
    """Projects codebook rows to the model width and mixes them with
    self-attention blocks that use no positions, so the output is
    permutation-equivariant in the rows."""

    def __init__(self, cfg: TtsConfig):
        super().__init__()
        if cfg.codebook_dim <= 0:
            raise TtsConfigError("codebook_dim must be positive")
        self.in_dim = cfg.codebook_dim
        self.proj = nn.Linear(cfg.codebook_dim, cfg.d_model)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d_model, cfg.n_heads, cfg.filter_channels, 1, cfg.p_dropout)
            for _ in range(cfg.n_codebook_layers)
        )

    def forward(self, cb, cb_mask):
        if cb.shape[-1] != self.in_dim:
            raise TtsConfigError(f"codebook has H={cb.shape[-1]}, model expects {self.in_dim}")
        s = self.proj(cb)
        for blk in self.blocks:
            s = blk(s, cb_mask)
        return s


class FusionBlock(TransformerBlock):
    """Cross-attention block: query = text feature, key/value = encoded codebook.

    Setting ``ablate`` zeroes the attention output (the block then only
    applies its norms and FFN to the text feature).
    """

    ablate = False

    def forward(self, x, mask=None, memory=None, memory_mask=None):
        y = self.attn(x, memory, memory, memory_mask)
        if self.ablate:
            y = torch.zeros_like(y)
        x = self.norm1(x + self.drop(y))
        y = self.ffn(x, mask)
        x = self.norm2(x + self.drop(y))
        if mask is not None:
            x = x * mask[..., None].to(x.dtype)
        return x


class TextEncoder(nn.Module):
    def __init__(self, cfg: TtsConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.emb = nn.Embedding(len(cfg.text_vocab), d)
        nn.init.normal_(self.emb.weight, 0.0, d**-0.5)
        self.layers = nn.ModuleList(
            TransformerBlock(d, cfg.n_heads, cfg.filter_channels, cfg.text_kernel, cfg.p_dropout)
            for _ in range(cfg.n_text_layers)
        )
        self.cb_enc = CodebookEncoder(cfg)
        self.fusion = FusionBlock(d, cfg.n_heads, cfg.filter_channels, cfg.text_kernel, cfg.p_dropout)
        self.proj = nn.Conv1d(d, 2 * cfg.inter_channels, 1)

    def embed(self, ids, lengths):
        mask = sequence_mask(lengths, ids.shape[1])
        h = self.emb(ids) * math.sqrt(self.cfg.d_model)
        h = h + sinusoidal_positions(ids.shape[1], self.cfg.d_model, h.dtype)[None]
        return h * mask[..., None].to(h.dtype), mask

    def pre_fusion(self, ids, lengths):
        """Intermediate feature h^{n-1} fed to the fusion block, (B, L, d)."""
        h, mask = self.embed(ids, lengths)
        for layer in self.layers[: self.cfg.fusion_layer_index]:
            h = layer(h, mask)
        return h, mask

    def fuse(self, h, mask, cb, cb_mask):
        s = self.cb_enc(cb, cb_mask)
        return self.fusion(h, mask, memory=s, memory_mask=cb_mask)

    def post_fusion(self, h, mask):
        for layer in self.layers[self.cfg.fusion_layer_index :]:
            h = layer(h, mask)
        h_text = h.transpose(1, 2)  # (B, d, L)
        m = mask[:, None, :].to(h.dtype)
        stats = self.proj(h_text) * m
        m_p, logs_p = torch.split(stats, self.cfg.inter_channels, dim=1)
        return h_text * m, m_p, logs_p, m

    def forward(self, ids, lengths, cb, cb_mask):
        h, mask = self.pre_fusion(ids, lengths)
        h = self.fuse(h, mask, cb, cb_mask)
        return self.post_fusion(h, mask)


class PosteriorEncoder(nn.Module):
    def __init__(self, n_mels: int, cfg: TtsConfig):
        super().__init__()
        self.out = cfg.inter_channels
        self.pre = nn.Conv1d(n_mels, cfg.posterior_hidden, 1)
        self.enc = WN(cfg.posterior_hidden, cfg.posterior_kernel, 1, cfg.posterior_layers)
        self.proj = nn.Conv1d(cfg.posterior_hidden, 2 * cfg.inter_channels, 1)

    def forward(self, mel, lengths, noise=None):
        mask = sequence_mask(lengths, mel.shape[2])[:, None, :].to(mel.dtype)
        h = self.enc(self.pre(mel) * mask, mask)
        stats = self.proj(h) * mask
        m, logs = torch.split(stats, self.out, dim=1)
        if noise is None:
            noise = torch.randn_like(m)
        z = (m + noise * torch.exp(logs)) * mask
        return z, m, logs, mask


class DurationGenerator(nn.Module):
    """Log-duration per text position from (h_text, Gaussian noise z_d)."""

    def __init__(self, cfg: TtsConfig):
        super().__init__()
        self.noise_dim = cfg.duration_noise_dim
        c = cfg.duration_filter
        k = cfg.duration_kernel
        self.pre = nn.Conv1d(cfg.d_model + cfg.duration_noise_dim, c, 1)
        self.convs = nn.ModuleList(nn.Conv1d(c, c, k, padding=k // 2) for _ in range(cfg.duration_layers))
        self.norms = nn.ModuleList(ChannelNorm(c) for _ in range(cfg.duration_layers))
        self.drop = nn.Dropout(cfg.p_dropout)
        self.proj = nn.Conv1d(c, 1, 1)

    def forward(self, h_text, z_d, mask):
        if z_d.shape[1] != self.noise_dim:
            raise TtsConfigError(f"z_d has {z_d.shape[1]} channels, expected {self.noise_dim}")
        x = self.pre(torch.cat([h_text, z_d], 1)) * mask
        for conv, norm in zip(self.convs, self.norms):
            x = self.drop(norm(torch.relu(conv(x * mask)))) * mask
        return self.proj(x) * mask


class DurationDiscriminator(nn.Module):
    """Scores (log-duration, h_text) pairs per text position."""

    def __init__(self, cfg: TtsConfig):
        super().__init__()
        c = cfg.duration_filter
        k = cfg.duration_kernel
        self.pre = nn.Conv1d(cfg.d_model + 1, c, 1)
        self.convs = nn.ModuleList(nn.Conv1d(c, c, k, padding=k // 2) for _ in range(cfg.duration_layers))
        self.proj = nn.Conv1d(c, 1, 1)

    def forward(self, d, h_text, mask):
        x = self.pre(torch.cat([d, h_text], 1)) * mask
        for conv in self.convs:
            x = F.leaky_relu(conv(x * mask), 0.2) * mask
        return self.proj(x) * mask


def _masked_mean(x, mask):
    return torch.sum(x * mask) / torch.clamp(torch.sum(mask), min=1.0)


def duration_disc_loss(d_real_out, d_fake_out, mask=None) -> torch.Tensor:
    """(D(d, h) - 1)^2 + D(d_hat, h)^2 averaged over valid positions."""
    if d_real_out.shape != d_fake_out.shape:
        raise ValueError("real/fake duration scores differ in shape")
    mask = torch.ones_like(d_real_out) if mask is None else mask
    return _masked_mean((d_real_out - 1) ** 2 + d_fake_out**2, mask)


def duration_gen_loss(d_fake_out, d_hat, d, lambda_dp: float = 1.0, mask=None):
    """(D(d_hat, h) - 1)^2 + lambda_dp * MSE(d_hat, d); returns (total, parts)."""
    if d_hat.shape != d.shape:
        raise ValueError(f"d_hat {tuple(d_hat.shape)} vs d {tuple(d.shape)}")
    mask = torch.ones_like(d) if mask is None else mask
    adv = _masked_mean((d_fake_out - 1) ** 2, mask)
    mse = _masked_mean((d_hat - d) ** 2, mask)
    total = adv + lambda_dp * mse
    return total, {"dur_adv": adv, "dur_mse": mse, "dur_gen": total}


# ---------------------------------------------------------------------------
# Full model


def prior_loglik(z_p, m_p, logs_p):
    """(B, L, T) log N(z_p[:, :, t] | m_p[:, :, l], exp(logs_p[:, :, l])) summed over channels."""
    s_p_sq_r = torch.exp(-2 * logs_p)  # (B, C, L)
    nc1 = torch.sum(-0.5 * math.log(2 * math.pi) - logs_p, 1, keepdim=True)  # (B, 1, L)
    nc2 = torch.matmul(-0.5 * (z_p**2).transpose(1, 2), s_p_sq_r)  # (B, T, L)
    nc3 = torch.matmul(z_p.transpose(1, 2), m_p * s_p_sq_r)  # (B, T, L)
    nc4 = torch.sum(-0.5 * (m_p**2) * s_p_sq_r, 1, keepdim=True)  # (B, 1, L)
    return (nc1 + nc2 + nc3 + nc4).transpose(1, 2)


def kl_prior_loss(z_p, logs_q, m_p, logs_p, logdet, z_mask):
    """Sample estimate of KL(q(z|x) || p(z|text, codebook, A)) per frame,
    including the flow log-determinant."""
    kl = logs_p - logs_q - 0.5 + 0.5 * (z_p - m_p) ** 2 * torch.exp(-2.0 * logs_p)
    return (torch.sum(kl * z_mask) - torch.sum(logdet)) / torch.sum(z_mask)


def slice_segments(x, starts, size):
    return torch.stack([x[i, :, s : s + size] for i, s in enumerate(starts)])


class TtsModel(nn.Module):
    def __init__(self, cfg: TtsConfig, n_mels: int = 80):
        super().__init__()
        self.cfg = cfg
        if isinstance(cfg, FtsConfig) and cfg.substitute_prior:
            from .fts import FtsPriorEncoder

            self.enc_p = FtsPriorEncoder(cfg)
        else:
            self.enc_p = TextEncoder(cfg)
        self.enc_q = PosteriorEncoder(n_mels, cfg)
        self.flow = FlowStack(cfg.inter_channels, cfg.flow_hidden, cfg.flow_kernel, cfg.flow_wn_layers,
                              cfg.flow_blocks, cfg.flow_heads, cfg.flow_transformer_dim)
        self.dec = Generator(cfg.inter_channels, cfg.decoder)
        self.dp = DurationGenerator(cfg)

    @property
    def kind(self) -> str:
        return "fts" if isinstance(self.cfg, FtsConfig) and self.cfg.substitute_prior else "tts"

    def forward_train(self, ids, id_lengths, mel, mel_lengths, cb, cb_mask, seg_starts, noise_d=None,
                      posterior_noise=None):
        h_text, m_p, logs_p, x_mask = self.enc_p(ids, id_lengths, cb, cb_mask)
        z, m_q, logs_q, y_mask = self.enc_q(mel, mel_lengths, posterior_noise)
        z_p, logdet = self.flow(z, y_mask)

        with torch.no_grad():
            ll = prior_loglik(z_p, m_p, logs_p)
            attn = batch_mas(ll, id_lengths, mel_lengths).to(z_p.dtype)  # (B, L, T)
        w = attn.sum(2, keepdim=True).transpose(1, 2)  # (B, 1, L)
        d = torch.log(torch.clamp(w, min=1.0)) * x_mask

        m_p_exp = torch.matmul(m_p, attn)
        logs_p_exp = torch.matmul(logs_p, attn)
        kl = kl_prior_loss(z_p, logs_q, m_p_exp, logs_p_exp, logdet, y_mask)

        h_dur = h_text.detach()
        if noise_d is None:
            noise_d = torch.randn(h_dur.shape[0], self.cfg.duration_noise_dim, h_dur.shape[2],
                                  dtype=h_dur.dtype)
        d_hat = self.dp(h_dur, noise_d, x_mask)

        z_slice = slice_segments(z, seg_starts, self.cfg.segment_frames)
        y_hat = self.dec(z_slice)
        return {
            "y_hat": y_hat, "kl": kl, "attn": attn, "d": d, "d_hat": d_hat, "h_dur": h_dur,
            "x_mask": x_mask, "durations": w[:, 0].round().long(),
        }

    def prior(self, ids, id_lengths, cb, cb_mask):
        return self.enc_p(ids, id_lengths, cb, cb_mask)

    @torch.no_grad()
    def infer_from_prior(self, h_text, m_p, logs_p, x_mask, duration_noise_scale=1.0, prior_noise_scale=0.667,
                         generator=None, durations_hook=None):
        b, _, L = h_text.shape
        z_d = torch.randn(b, self.cfg.duration_noise_dim, L, generator=generator, dtype=h_text.dtype)
        logw = self.dp(h_text, z_d * duration_noise_scale, x_mask)
        w = torch.clamp(torch.round(torch.exp(logw)), min=1.0) * x_mask
        dur = w[:, 0].long()
        if durations_hook is not None:
            dur = torch.as_tensor(durations_hook(dur.clone()), dtype=torch.long)
            if torch.any(dur[x_mask[:, 0] > 0] < 1):
                raise ValueError("durations_hook produced a duration below 1")
        T = int(dur.sum(1).max())
        attn = torch.zeros(b, L, T, dtype=h_text.dtype)
        for i in range(b):
            ends = torch.cumsum(dur[i], 0)
            starts = ends - dur[i]
            for l in range(L):
                attn[i, l, starts[l] : ends[l]] = 1.0
        y_mask = (attn.sum(1, keepdim=True) > 0).to(h_text.dtype)
        m = torch.matmul(m_p, attn)
        logs = torch.matmul(logs_p, attn)
        eps = torch.randn(m.shape, generator=generator, dtype=m.dtype)
        z_p = (m + eps * torch.exp(logs) * prior_noise_scale) * y_mask
        z = self.flow.inverse(z_p, y_mask)
        y = self.dec(z * y_mask)
        return y, dur


# ---------------------------------------------------------------------------
# Single-utterance operations


def _ids_tensor(p: PhonemeSequence | np.ndarray) -> torch.Tensor:
    seq = p if isinstance(p, PhonemeSequence) else PhonemeSequence(p)
    return torch.from_numpy(seq.ids)[None]


def encode_text_with_fusion(model: TtsModel, p: PhonemeSequence, cb: SpeakerCodebook):
    """Returns (h_text (L, d), m_p (L, C), logs_p (L, C))."""
    ids = _ids_tensor(p)
    dtype = next(model.parameters()).dtype
    cbt, cb_mask = pad_codebooks([cb], dtype)
    h_text, m_p, logs_p, _ = model.enc_p(ids, torch.tensor([ids.shape[1]]), cbt, cb_mask)
    return h_text[0].T, m_p[0].T, logs_p[0].T


def duration_generate(model: TtsModel, h_text, z_d):
    """h_text (L, d), z_d (L, noise_dim) -> log-durations (L,)."""
    mask = torch.ones(1, 1, h_text.shape[0], dtype=h_text.dtype)
    return model.dp(h_text.T[None], z_d.T[None].to(h_text.dtype), mask)[0, 0]


def synthesize(model: TtsModel, p: PhonemeSequence, cb: SpeakerCodebook, duration_noise_scale: float = 1.0,
               prior_noise_scale: float = 0.667, seed: int = 0, sample_rate: int = 22050,
               durations_hook=None) -> Waveform:
    return synthesize_with_durations(model, p, cb, duration_noise_scale, prior_noise_scale, seed,
                                     sample_rate, durations_hook)[0]


def synthesize_with_durations(model: TtsModel, p: PhonemeSequence, cb: SpeakerCodebook,
                              duration_noise_scale: float = 1.0, prior_noise_scale: float = 0.667, seed: int = 0,
                              sample_rate: int = 22050, durations_hook=None) -> tuple[Waveform, np.ndarray]:
    """Like ``synthesize`` but also returns the integer frame durations used."""
    if p is None or len(getattr(p, "ids", p)) == 0:
        raise TextError("empty phoneme sequence")
    model.eval()
    ids = _ids_tensor(p)
    dtype = next(model.parameters()).dtype
    cbt, cb_mask = pad_codebooks([cb], dtype)
    with torch.no_grad():
        h_text, m_p, logs_p, x_mask = model.prior(ids, torch.tensor([ids.shape[1]]), cbt, cb_mask)
    return _finish(model, h_text, m_p, logs_p, x_mask, duration_noise_scale, prior_noise_scale, seed,
                   sample_rate, durations_hook)


def _finish(model, h_text, m_p, logs_p, x_mask, duration_noise_scale, prior_noise_scale, seed, sample_rate,
            durations_hook):
    gen = torch.Generator().manual_seed(int(seed))
    y, dur = model.infer_from_prior(h_text, m_p, logs_p, x_mask, duration_noise_scale, prior_noise_scale,
                                    gen, durations_hook)
    return Waveform(y[0, 0].float().numpy(), sample_rate), dur[0].numpy()


# ---------------------------------------------------------------------------
# Parameter reuse from a trained SFEN


def init_decoder_from_sfen(model: TtsModel, disc: MultiDiscriminator, sfen_ckpt: Checkpoint) -> list[str]:
    """Copy the last three upsampling stages of the waveform generator and all
    discriminator parameters from an SFEN checkpoint. Returns the copied
    TTS parameter names (``dec.`` / ``disc.`` prefixed)."""
    src_dec = sfen_ckpt.subset("model/decoder.")
    src_disc = sfen_ckpt.subset("disc/")
    n_stages = len(model.dec.ups)
    src_stages = {k.split(".")[1] for k in src_dec if k.startswith("ups.")}
    if len(src_stages) != n_stages:
        raise ParameterMismatchError(
            f"SFEN decoder has {len(src_stages)} upsampling stages, TTS decoder has {n_stages}"
        )
    plan = []
    dec_state = model.dec.state_dict()
    prefixes = [p for i in range(1, n_stages) for p in model.dec.stage_prefixes(i)]
    for name, t in dec_state.items():
        if any(name.startswith(p) for p in prefixes):
            plan.append(("dec." + name, t, src_dec.get(name)))
    disc_state = disc.state_dict()
    for name, t in disc_state.items():
        plan.append(("disc." + name, t, src_disc.get(name)))
    bad = [n for n, t, s in plan if s is None or tuple(s.shape) != tuple(t.shape)]
    if bad:
        details = []
        for n, t, s in plan:
            if n in bad:
                details.append(f"{n}: tts {tuple(t.shape)} vs sfen {None if s is None else tuple(s.shape)}")
        raise ParameterMismatchError("incompatible tensors: " + "; ".join(details))
    with torch.no_grad():
        for n, t, s in plan:
            t.copy_(s.to(t.dtype))
    return [n for n, _, _ in plan]


# ---------------------------------------------------------------------------
# Training


@dataclass
class Utterance:
    clip_id: str
    speaker_id: str
    ids: np.ndarray
    samples: np.ndarray
    mel: np.ndarray  # (T, n_mels)


class TtsTrainer:
    """Four optimiser steps per batch: waveform discriminator, main generator,
    duration discriminator, duration generator."""

    def __init__(self, cfg: PipelineConfig, utterances: list[Utterance], codebooks: dict[str, SpeakerCodebook],
                 kind: str = "tts", work_dir=None):
        self.cfg = cfg
        self.kind = kind
        self.mcfg = cfg.fts if kind == "fts" else cfg.tts
        seg = self.mcfg.segment_frames
        missing = sorted({u.speaker_id for u in utterances} - set(codebooks))
        if missing:
            raise ValueError(f"no codebook for speakers {missing}")
        usable = [u for u in utterances if u.mel.shape[0] >= max(seg, len(u.ids))]
        if len(usable) < len(utterances):
            log.warning("skipping %d utterances shorter than a segment or their text", len(utterances) - len(usable))
        if not usable:
            raise ValueError("no usable utterances")
        self.utts = usable
        self.codebooks = codebooks
        self.work_dir = Path(work_dir) if work_dir is not None else None
        seed = cfg.training.seed
        torch.manual_seed(seed)
        self.rng = np.random.default_rng(seed)
        self.model = TtsModel(self.mcfg, cfg.audio.mel.n_mels)
        self.disc = MultiDiscriminator(self.mcfg.discriminator)
        self.dur_disc = DurationDiscriminator(self.mcfg)
        self.extractor = MelExtractor(cfg.audio.mel)
        ocfg = cfg.training.optimizer
        main = [p for n, p in self.model.named_parameters() if not n.startswith("dp.")]
        self.opt_g = make_optimizer(main, ocfg)
        self.opt_d = make_optimizer(self.disc.parameters(), ocfg)
        self.opt_dp = make_optimizer(self.model.dp.parameters(), ocfg)
        self.opt_dd = make_optimizer(self.dur_disc.parameters(), ocfg)
        self.step = 0
        self.epoch = 0
        self.order: list[int] = []
        self.init_source = None
        self.loss_log = LossLog(self.work_dir / "losses.jsonl" if self.work_dir else None)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.utts) / self.cfg.training.batch_size)

    def current_lr(self) -> float:
        o = self.cfg.training.optimizer
        return lr_at_epoch(o.lr, o.tts_lr_decay, self.epoch)

    def init_from_sfen(self, sfen_ckpt: Checkpoint) -> list[str]:
        if self.kind == "fts":
            raise ValueError("the feature-to-speech model is trained from random initialisation only")
        names = init_decoder_from_sfen(self.model, self.disc, sfen_ckpt)
        self.init_source = "sfen"
        return names

    def make_batch(self, idx):
        utts = [self.utts[i] for i in idx]
        hop = self.cfg.audio.mel.hop_size
        seg = self.mcfg.segment_frames
        B = len(utts)
        L = max(len(u.ids) for u in utts)
        T = max(u.mel.shape[0] for u in utts)
        ids = torch.zeros(B, L, dtype=torch.long)
        mel = torch.zeros(B, self.cfg.audio.mel.n_mels, T)
        for i, u in enumerate(utts):
            ids[i, : len(u.ids)] = torch.from_numpy(u.ids)
            mel[i, :, : u.mel.shape[0]] = torch.from_numpy(u.mel.T)
        id_lengths = torch.tensor([len(u.ids) for u in utts])
        mel_lengths = torch.tensor([u.mel.shape[0] for u in utts])
        starts = [int(self.rng.integers(0, u.mel.shape[0] - seg + 1)) for u in utts]
        y = torch.from_numpy(np.stack([u.samples[s * hop : (s + seg) * hop] for u, s in zip(utts, starts)]))[:, None]
        cb, cb_mask = pad_codebooks([self.codebooks[u.speaker_id] for u in utts])
        return {"ids": ids, "id_lengths": id_lengths, "mel": mel, "mel_lengths": mel_lengths,
                "cb": cb, "cb_mask": cb_mask, "starts": starts, "y": y}

    def next_batch(self):
        bs = min(self.cfg.training.batch_size, len(self.utts))
        if len(self.order) < bs:
            self.order = list(self.rng.permutation(len(self.utts)))
        idx, self.order = self.order[:bs], self.order[bs:]
        return self.make_batch(idx)

    def generator_losses(self, batch, out):
        """Main generator loss terms given forward outputs (discriminator frozen)."""
        seg = self.mcfg.segment_frames
        mel_seg = slice_segments(batch["mel"], batch["starts"], seg)
        y_hat = out["y_hat"]
        mel_hat = self.extractor(y_hat.squeeze(1))
        _, f_real = self.disc(batch["y"])
        d_fake, f_fake = self.disc(y_hat)
        adv = generator_adversarial_loss(d_fake)
        fm = feature_matching_loss(f_real, f_fake)
        mel_loss = torch.mean(torch.abs(mel_seg - mel_hat))
        total = adv + fm + self.mcfg.lambda_mel * mel_loss + out["kl"]
        return total, {"adv": adv, "fm": fm, "mel": mel_loss, "kl": out["kl"], "gen": total}

    def train_step(self, batch=None) -> dict[str, float]:
        batch = batch if batch is not None else self.next_batch()
        self.model.train()
        out = self.model.forward_train(batch["ids"], batch["id_lengths"], batch["mel"], batch["mel_lengths"],
                                       batch["cb"], batch["cb_mask"], batch["starts"])
        y, y_hat = batch["y"], out["y_hat"]

        d_real, _ = self.disc(y)
        d_fake, _ = self.disc(y_hat.detach())
        loss_d = discriminator_loss(d_real, d_fake)
        check_finite(self.step + 1, {"disc": loss_d.item()})
        self.opt_d.zero_grad()
        loss_d.backward()
        self.opt_d.step()

        total_g, parts = self.generator_losses(batch, out)
        terms = {"disc": loss_d.item(), **{k: v.item() for k, v in parts.items()}}
        check_finite(self.step + 1, terms)
        self.opt_g.zero_grad()
        total_g.backward()
        self.opt_g.step()

        x_mask, d, d_hat, h = out["x_mask"], out["d"], out["d_hat"], out["h_dur"]
        loss_dd = duration_disc_loss(self.dur_disc(d, h, x_mask), self.dur_disc(d_hat.detach(), h, x_mask), x_mask)
        self.opt_dd.zero_grad()
        loss_dd.backward()
        self.opt_dd.step()

        loss_dg, dparts = duration_gen_loss(self.dur_disc(d_hat, h, x_mask), d_hat, d, self.mcfg.lambda_dp, x_mask)
        terms["dur_disc"] = loss_dd.item()
        terms.update({k: v.item() for k, v in dparts.items()})
        check_finite(self.step + 1, terms)
        self.opt_dp.zero_grad()
        loss_dg.backward()
        self.opt_dp.step()

        self.step += 1
        if self.step % self.steps_per_epoch == 0:
            self.epoch += 1
            for opt in (self.opt_g, self.opt_d, self.opt_dp, self.opt_dd):
                set_lr(opt, self.current_lr())
        if self.step % self.cfg.training.log_interval == 0:
            self.loss_log.log(self.step, terms)
        self.last_durations = out["durations"]
        self.last_mel_lengths = batch["mel_lengths"]
        return terms

    def train(self, max_steps: int | None = None, callback=None) -> "TtsTrainer":
        max_steps = max_steps if max_steps is not None else self.cfg.training.max_steps
        interval = self.cfg.training.checkpoint_interval
        while self.step < max_steps:
            terms = self.train_step()
            if self.work_dir is not None and interval and self.step % interval == 0:
                self.save(self.work_dir / f"ckpt_{self.step:08d}.elfk")
                self.save(self.work_dir / "latest.elfk")
            if callback is not None and callback(self, terms):
                break
        return self

    def checkpoint(self) -> Checkpoint:
        tensors = {}
        tensors.update(module_tensors("model/", self.model))
        tensors.update(module_tensors("disc/", self.disc))
        tensors.update(module_tensors("dur_disc/", self.dur_disc))
        tensors.update(optimizer_tensors("opt_g/", self.opt_g, self.model))
        tensors.update(optimizer_tensors("opt_dp/", self.opt_dp, self.model))
        tensors.update(optimizer_tensors("opt_d/", self.opt_d, self.disc))
        tensors.update(optimizer_tensors("opt_dd/", self.opt_dd, self.dur_disc))
        meta = {
            "config": self.cfg.to_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "order": [int(i) for i in self.order],
            "rng": rng_state(self.rng),
            "init_source": self.init_source,
        }
        return Checkpoint(self.kind, meta, tensors)

    def save(self, path) -> None:
        save_checkpoint(path, self.checkpoint())

    def restore(self, ckpt: Checkpoint) -> None:
        if ckpt.kind != self.kind:
            raise CheckpointError(f"checkpoint holds a {ckpt.kind!r} model, trainer is {self.kind!r}")
        load_module_tensors("model/", self.model, ckpt.tensors)
        load_module_tensors("disc/", self.disc, ckpt.tensors)
        load_module_tensors("dur_disc/", self.dur_disc, ckpt.tensors)
        load_optimizer_tensors("opt_g/", self.opt_g, self.model, ckpt.tensors)
        load_optimizer_tensors("opt_dp/", self.opt_dp, self.model, ckpt.tensors)
        load_optimizer_tensors("opt_d/", self.opt_d, self.disc, ckpt.tensors)
        load_optimizer_tensors("opt_dd/", self.opt_dd, self.dur_disc, ckpt.tensors)
        self.step = ckpt.meta["step"]
        self.epoch = ckpt.meta["epoch"]
        self.order = list(ckpt.meta["order"])
        self.init_source = ckpt.meta.get("init_source")
        restore_rng_state(ckpt.meta["rng"], self.rng)
        for opt in (self.opt_g, self.opt_d, self.opt_dp, self.opt_dd):
            set_lr(opt, self.current_lr())


def load_tts(path_or_ckpt, kind: str = "tts") -> tuple[TtsModel, PipelineConfig]:
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else load_checkpoint(path_or_ckpt, kind)
    if ckpt.kind != kind:
        raise CheckpointError(f"checkpoint holds a {ckpt.kind!r} model, expected {kind!r}")
    cfg = from_dict(ckpt.meta["config"])
    model = TtsModel(cfg.fts if kind == "fts" else cfg.tts, cfg.audio.mel.n_mels)
    load_module_tensors("model/", model, ckpt.tensors)
    model.eval()
    return model, cfg
