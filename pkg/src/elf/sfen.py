"""Speech feature encoding network: a variational autoencoder from log-mel
frames to per-frame diagonal Gaussians and back to raw waveform, trained
with an adversarial + feature-matching + mel-L1 + KL objective."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .audio import MelConfig, MelExtractor, MelSpectrogram, Waveform, random_frame_offset
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import OptimizerConfig, PipelineConfig, SfenConfig, from_dict
from .modules import WN
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


class DimensionError(ValueError):
    pass


@dataclass
class LatentFrameDistribution:
    """Per-frame Gaussian parameters, both (T, H)."""

    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise DimensionError(f"mu {tuple(self.mu.shape)} vs sigma {tuple(self.sigma.shape)}")

    @property
    def n_frames(self) -> int:
        return self.mu.shape[-2]


class SfenEncoder(nn.Module):
    def __init__(self, cfg: SfenConfig):
        super().__init__()
        self.cfg = cfg
        self.pre = nn.Conv1d(cfg.n_mels, cfg.encoder_hidden, 1)
        self.enc = WN(cfg.encoder_hidden, cfg.encoder_kernel, cfg.encoder_dilation, cfg.encoder_layers)
        self.proj = nn.Conv1d(cfg.encoder_hidden, 2 * cfg.latent_dim, 1)

    def forward(self, mel, mask=None):
        """mel: (B, n_mels, T) -> mu, sigma: (B, H, T)."""
        if mel.shape[1] != self.cfg.n_mels:
            raise DimensionError(f"expected {self.cfg.n_mels} mel bins, got {mel.shape[1]}")
        if mask is None:
            mask = torch.ones_like(mel[:, :1])
        h = self.enc(self.pre(mel) * mask, mask)
        stats = self.proj(h) * mask
        mu, logs = torch.split(stats, self.cfg.latent_dim, dim=1)
        sigma = torch.exp(logs).clamp_min(self.cfg.min_sigma)
        return mu, sigma


class SFEN(nn.Module):
    def __init__(self, cfg: SfenConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SfenEncoder(cfg)
        self.decoder = Generator(cfg.latent_dim, cfg.decoder)

    def forward(self, mel, noise=None):
        mu, sigma = self.encoder(mel)
        if noise is None:
            noise = torch.randn_like(mu)
        z = mu + sigma * noise
        return self.decoder(z), mu, sigma


# ---------------------------------------------------------------------------
# Operations on single utterances (time-major)


def _as_tensor(x, dtype=None) -> torch.Tensor:
    t = x if torch.is_tensor(x) else torch.from_numpy(np.asarray(x))
    return t.to(dtype) if dtype is not None else t


def encode(model: SFEN, mel: MelSpectrogram | np.ndarray | torch.Tensor) -> LatentFrameDistribution:
    frames = mel.frames if isinstance(mel, MelSpectrogram) else mel
    dtype = next(model.parameters()).dtype
    x = _as_tensor(frames, dtype)
    if x.ndim != 2 or x.shape[1] != model.cfg.n_mels:
        raise DimensionError(f"mel must be (T, {model.cfg.n_mels}), got {tuple(x.shape)}")
    mu, sigma = model.encoder(x.T[None])
    return LatentFrameDistribution(mu[0].T, sigma[0].T)


def reparameterize(dist: LatentFrameDistribution, noise) -> torch.Tensor:
    noise = _as_tensor(noise, dist.mu.dtype)
    if noise.shape != dist.mu.shape:
        raise DimensionError(f"noise {tuple(noise.shape)} vs latent {tuple(dist.mu.shape)}")
    return dist.mu + dist.sigma * noise


def decode(model: SFEN, z, sample_rate: int = 22050) -> Waveform:
    dtype = next(model.parameters()).dtype
    z = _as_tensor(z, dtype)
    if z.ndim != 2 or z.shape[1] != model.cfg.latent_dim:
        raise DimensionError(f"z must be (T, {model.cfg.latent_dim}), got {tuple(z.shape)}")
    with torch.no_grad():
        y = model.decoder(z.T[None])[0, 0]
    return Waveform(y.float().numpy(), sample_rate)


def kl_unit_gaussian(dist_or_mu, sigma=None) -> torch.Tensor:
    """Mean over elements of KL(N(mu, sigma^2) || N(0, 1))."""
    if isinstance(dist_or_mu, LatentFrameDistribution):
        mu, sigma = dist_or_mu.mu, dist_or_mu.sigma
    else:
        mu, sigma = _as_tensor(dist_or_mu), _as_tensor(sigma)
    if torch.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    return torch.mean(0.5 * (mu**2 + sigma**2 - 1.0) - torch.log(sigma))


def mel_l1(s, s_hat) -> torch.Tensor:
    s, s_hat = _as_tensor(s), _as_tensor(s_hat)
    if s.shape != s_hat.shape:
        raise DimensionError(f"mel shapes differ: {tuple(s.shape)} vs {tuple(s_hat.shape)}")
    return torch.mean(torch.abs(s - s_hat))


def reconstruction_loss(s, y_hat, cfg: MelConfig | None = None, extractor: MelExtractor | None = None):
    """L1 between mel ``s`` and the mel of waveform ``y_hat``.

    Accepts a ``MelSpectrogram`` + ``Waveform`` pair (time-major) or batched
    tensors ``s: (B, n_mels, T)``, ``y_hat: (B, N)``.
    """
    if isinstance(s, MelSpectrogram):
        cfg = s.config
        s = _as_tensor(s.frames).T[None]
    if isinstance(y_hat, Waveform):
        y_hat = _as_tensor(y_hat.samples)[None]
    if extractor is None:
        extractor = MelExtractor(cfg or MelConfig())
    s_hat = extractor(y_hat.to(s.dtype))
    if s_hat.shape[-1] != s.shape[-1]:
        raise DimensionError(f"frame count mismatch: {s.shape[-1]} vs {s_hat.shape[-1]}")
    return mel_l1(s, s_hat)


def sfen_discriminator_loss(d_real, d_fake) -> torch.Tensor:
    return discriminator_loss(d_real, d_fake)


def sfen_generator_loss(d_fake, feat_real, feat_fake, s, s_hat, kl, lambda_sf: float = 45.0,
                        recon=None):
    """Total = adversarial + feature matching + lambda_sf * mel-L1 + KL.

    ``recon`` may be passed precomputed instead of ``s``/``s_hat``.
    """
    adv = generator_adversarial_loss(d_fake) if len(d_fake) else torch.tensor(0.0)
    fm = feature_matching_loss(feat_real, feat_fake) if len(feat_real) else torch.tensor(0.0)
    if recon is None:
        recon = mel_l1(s, s_hat)
    recon = _as_tensor(recon)
    kl = _as_tensor(kl)
    total = adv + fm + lambda_sf * recon + kl
    return total, {"adv": adv, "fm": fm, "recon": recon, "kl": kl, "total": total}


# ---------------------------------------------------------------------------
# Training


@dataclass
class Clip:
    clip_id: str
    speaker_id: str
    samples: np.ndarray  # float32 (N,)
    mel: np.ndarray  # float32 (T, n_mels)
    transcript: str = ""


class SfenTrainer:
    """Alternating discriminator / generator updates on random hop-aligned
    windows; one epoch is one pass of ``ceil(n_clips / batch_size)`` steps."""

    kind = "sfen"

    def __init__(self, cfg: PipelineConfig, clips: list[Clip], work_dir=None):
        if not clips:
            raise ValueError("empty training set")
        self.cfg = cfg
        scfg = cfg.sfen
        hop = cfg.audio.mel.hop_size
        self.seg_frames = scfg.segment_samples // hop
        usable = [c for c in clips if c.mel.shape[0] >= self.seg_frames]
        if len(usable) < len(clips):
            log.warning("skipping %d clips shorter than one segment", len(clips) - len(usable))
        if not usable:
            raise ValueError("no clip is long enough for segment_samples=%d" % scfg.segment_samples)
        self.clips = usable
        self.work_dir = Path(work_dir) if work_dir is not None else None
        seed = cfg.training.seed
        torch.manual_seed(seed)
        self.rng = np.random.default_rng(seed)
        self.model = SFEN(scfg)
        self.disc = MultiDiscriminator(scfg.discriminator)
        self.extractor = MelExtractor(cfg.audio.mel)
        ocfg = cfg.training.optimizer
        self.opt_g = make_optimizer(self.model.parameters(), ocfg)
        self.opt_d = make_optimizer(self.disc.parameters(), ocfg)
        self.step = 0
        self.epoch = 0
        self.order: list[int] = []
        self.loss_log = LossLog(self.work_dir / "losses.jsonl" if self.work_dir else None)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.clips) / self.cfg.training.batch_size)

    def _lr_decay(self) -> float:
        return self.cfg.training.optimizer.lr_decay

    def current_lr(self) -> float:
        return lr_at_epoch(self.cfg.training.optimizer.lr, self._lr_decay(), self.epoch)

    def next_batch(self):
        bs = min(self.cfg.training.batch_size, len(self.clips))
        if len(self.order) < bs:
            self.order = list(self.rng.permutation(len(self.clips)))
        idx, self.order = self.order[:bs], self.order[bs:]
        hop = self.cfg.audio.mel.hop_size
        ys, mels = [], []
        for i in idx:
            c = self.clips[i]
            start = random_frame_offset(c.mel.shape[0], self.seg_frames, self.rng)
            mels.append(c.mel[start : start + self.seg_frames].T)
            ys.append(c.samples[start * hop : (start + self.seg_frames) * hop])
        return torch.from_numpy(np.stack(ys))[:, None], torch.from_numpy(np.stack(mels))

    def train_step(self, batch=None) -> dict[str, float]:
        y, mel = batch if batch is not None else self.next_batch()
        self.model.train()
        self.disc.train()
        y_hat, mu, sigma = self.model(mel)
        mel_hat = self.extractor(y_hat.squeeze(1))

        d_real, _ = self.disc(y)
        d_fake, _ = self.disc(y_hat.detach())
        loss_d = discriminator_loss(d_real, d_fake)
        check_finite(self.step + 1, {"disc": loss_d.item()})
        self.opt_d.zero_grad()
        loss_d.backward()
        self.opt_d.step()

        _, f_real = self.disc(y)
        d_fake, f_fake = self.disc(y_hat)
        kl = kl_unit_gaussian(mu, sigma)
        total, parts = sfen_generator_loss(d_fake, f_real, f_fake, mel, mel_hat, kl, self.cfg.sfen.lambda_sf)
        terms = {"disc": loss_d.item(), **{k: v.item() for k, v in parts.items()}}
        check_finite(self.step + 1, terms)
        self.opt_g.zero_grad()
        total.backward()
        self.opt_g.step()

        self.step += 1
        if self.step % self.steps_per_epoch == 0:
            self.epoch += 1
            lr = self.current_lr()
            set_lr(self.opt_g, lr)
            set_lr(self.opt_d, lr)
        if self.step % self.cfg.training.log_interval == 0:
            self.loss_log.log(self.step, terms)
        return terms

    def train(self, max_steps: int | None = None, callback=None) -> "SfenTrainer":
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

    # -- persistence --------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        tensors = {}
        tensors.update(module_tensors("model/", self.model))
        tensors.update(module_tensors("disc/", self.disc))
        tensors.update(optimizer_tensors("opt_g/", self.opt_g, self.model))
        tensors.update(optimizer_tensors("opt_d/", self.opt_d, self.disc))
        meta = {
            "config": self.cfg.to_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "order": [int(i) for i in self.order],
            "rng": rng_state(self.rng),
        }
        return Checkpoint(self.kind, meta, tensors)

    def save(self, path) -> None:
        save_checkpoint(path, self.checkpoint())

    def restore(self, ckpt: Checkpoint) -> None:
        load_module_tensors("model/", self.model, ckpt.tensors)
        load_module_tensors("disc/", self.disc, ckpt.tensors)
        load_optimizer_tensors("opt_g/", self.opt_g, self.model, ckpt.tensors)
        load_optimizer_tensors("opt_d/", self.opt_d, self.disc, ckpt.tensors)
        self.step = ckpt.meta["step"]
        self.epoch = ckpt.meta["epoch"]
        self.order = list(ckpt.meta["order"])
        restore_rng_state(ckpt.meta["rng"], self.rng)
        lr = self.current_lr()
        set_lr(self.opt_g, lr)
        set_lr(self.opt_d, lr)


def train_sfen(cfg: PipelineConfig, clips: list[Clip], max_steps: int | None = None, work_dir=None,
               resume=None, callback=None) -> SfenTrainer:
    trainer = SfenTrainer(cfg, clips, work_dir)
    if resume is not None:
        trainer.restore(load_checkpoint(resume, "sfen"))
    return trainer.train(max_steps, callback)


def load_sfen(path_or_ckpt) -> tuple[SFEN, PipelineConfig]:
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else load_checkpoint(path_or_ckpt, "sfen")
    cfg = from_dict(ckpt.meta["config"])
    model = SFEN(cfg.sfen)
    load_module_tensors("model/", model, ckpt.tensors)
    model.eval()
    return model, cfg
