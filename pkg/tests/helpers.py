"""Oracles shared by the unit and acceptance suites."""
import itertools
import math

import numpy as np
import torch

from elf.audio import MelConfig, MelExtractor, Waveform, mel_spectrogram
from elf.config import SfenConfig, TtsConfig
from elf.sfen import SFEN, Clip, SfenTrainer, kl_unit_gaussian, sfen_generator_loss
from elf.tts import TtsModel, Utterance, slice_segments
from elf.vocoder import (
    DecoderConfig,
    DiscriminatorConfig,
    MultiDiscriminator,
    feature_matching_loss,
    generator_adversarial_loss,
)

from conftest import random_codebook

# ---------------------------------------------------------------------------
# exhaustive alignment enumeration


def monotonic_paths(L, T):
    """Every monotonic, contiguous, surjective assignment of T frames to L
    tokens, as a duration vector (each >= 1, summing to T)."""
    for cuts in itertools.combinations(range(1, T), L - 1):
        bounds = (0, *cuts, T)
        yield [bounds[i + 1] - bounds[i] for i in range(L)]


def path_score(loglik, durs):
    s, t = 0.0, 0
    for i, d in enumerate(durs):
        s += float(loglik[i, t : t + d].sum())
        t += d
    return s


def brute_force_alignment(loglik):
    L, T = loglik.shape
    best, best_score = None, -math.inf
    for durs in monotonic_paths(L, T):
        s = path_score(loglik, durs)
        if s > best_score:
            best, best_score = durs, s
    return best, best_score


# ---------------------------------------------------------------------------
# exhaustive k-means


def partitions(n, k):
    """All surjective labelings of n items into k unlabeled groups (canonical:
    label of first occurrence increases)."""

    def rec(i, labels, used):
        if i == n:
            if used == k:
                yield list(labels)
            return
        for lab in range(min(used + 1, k)):
            labels.append(lab)
            yield from rec(i + 1, labels, max(used, lab + 1))
            labels.pop()

    yield from rec(0, [], 0)


def optimal_sse(points, k):
    best = math.inf
    for labels in partitions(len(points), k):
        lab = np.array(labels)
        sse = 0.0
        for j in range(k):
            grp = points[lab == j]
            sse += float(((grp - grp.mean(0)) ** 2).sum())
        best = min(best, sse)
    return best


def optimal_sse_all_labelings(points, k, chunk=1 << 16):
    """Exact k-means optimum by scanning all k**N labelings (empty groups are
    allowed, which never beats the best labeling with every group used)."""
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    total = float((x**2).sum())
    best = math.inf
    powers = k ** np.arange(n)
    for start in range(0, k**n, chunk):
        codes = np.arange(start, min(start + chunk, k**n))
        labels = (codes[:, None] // powers) % k  # (M, N)
        gain = np.zeros(len(codes))
        for j in range(k):
            onehot = (labels == j).astype(np.float64)
            cnt = onehot.sum(1)
            sums = onehot @ x
            gain += np.where(cnt > 0, (sums**2).sum(1) / np.maximum(cnt, 1), 0.0)
        best = min(best, total - float(gain.max()))
    return max(best, 0.0)


# ---------------------------------------------------------------------------
# finite differences


def fd_check(loss_fn, params, rng, per_tensor=3, eps=1e-6, reference=None):
    """Compare autograd against central differences on a few random entries of
    each tensor in ``params``. Returns {name: norm-wise relative error}.

    ``reference`` is an optional (loss_fn, params) pair built from the same
    seed in float64; the differences are then taken there, so a float32
    gradient is judged against a numerically clean derivative."""
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    fd_loss, fd_params = reference or (loss_fn, params)
    errors = {}
    for name, p in params.items():
        flat = fd_params[name].data.view(-1)
        idx = rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
        analytic, numeric = [], []
        for i in idx:
            g = p.grad.view(-1)[i] if p.grad is not None else 0.0
            analytic.append(float(g))
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + eps
                up = float(fd_loss())
                flat[i] = orig - eps
                down = float(fd_loss())
                flat[i] = orig
            numeric.append((up - down) / (2 * eps))
        a, n = np.array(analytic), np.array(numeric)
        denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
        errors[name] = float(np.linalg.norm(a - n) / denom)
    return errors


def micro_sfen_setup(dtype=torch.float64, seed=0):
    """H=4, T=2, hop=4 SFEN with a fixed real segment and fixed noise; every
    generator parameter (encoder and decoder) is checked."""
    torch.manual_seed(seed)
    mel_cfg = MelConfig(fft_size=8, window_size=8, hop_size=4, n_mels=4, sample_rate=64)
    dec = DecoderConfig(upsample_initial_channel=8, upsample_factors=[2, 2], upsample_kernels=[4, 4],
                        resblock_kernels=[3], resblock_dilations=[[1]])
    cfg = SfenConfig(n_mels=4, latent_dim=4, encoder_hidden=6, encoder_layers=2, encoder_kernel=3,
                     segment_samples=8, decoder=dec)
    model = SFEN(cfg).to(dtype)
    disc = MultiDiscriminator(DiscriminatorConfig(periods=[2], n_scales=1, period_channels=[4, 4],
                                                  scale_channels=[4, 4])).to(dtype)
    ext = MelExtractor(mel_cfg).to(dtype)
    g = torch.Generator().manual_seed(seed)
    y = (0.5 * torch.randn(1, 1, 8, generator=g)).to(dtype)
    mel = ext(y[:, 0]).detach()
    noise = torch.randn(1, 4, 2, generator=g).to(dtype)

    def loss_fn():
        y_hat, mu, sigma = model(mel, noise)
        _, f_real = disc(y)
        d_fake, f_fake = disc(y_hat)
        total, _ = sfen_generator_loss(d_fake, f_real, f_fake, mel, ext(y_hat[:, 0]), kl_unit_gaussian(mu, sigma),
                                       cfg.lambda_sf)
        return total

    params = dict(model.named_parameters())
    return loss_fn, params


def micro_tts_setup(dtype=torch.float64, seed=0):
    """Toy TTS generator loss (adversarial + feature matching + mel + KL) with
    the duration noise, alignment input and segment offsets all fixed."""
    from elf.codebook import SpeakerCodebook
    from elf.tts import pad_codebooks

    torch.manual_seed(seed)
    mel_cfg = MelConfig(fft_size=16, window_size=16, hop_size=4, n_mels=6, sample_rate=64)
    dec = DecoderConfig(upsample_initial_channel=8, upsample_factors=[2, 2], upsample_kernels=[4, 4],
                        resblock_kernels=[3], resblock_dilations=[[1]])
    cfg = TtsConfig(text_vocab="_abcd", d_model=8, n_text_layers=2, fusion_layer_index=1, n_heads=2,
                    filter_channels=8, codebook_dim=4, p_dropout=0.0, inter_channels=4, posterior_hidden=4,
                    posterior_layers=1, flow_blocks=1, flow_hidden=4, flow_wn_layers=1, flow_transformer_dim=4,
                    duration_filter=4, segment_frames=4, decoder=dec)
    model = TtsModel(cfg, n_mels=6)
    with torch.no_grad():
        # zero-initialised projections would make most of the flow invisible to the check;
        # jitter before the dtype cast so both precisions share the same weights
        jg = torch.Generator().manual_seed(seed + 1)
        for p in model.parameters():
            if torch.count_nonzero(p) == 0:
                p.normal_(0.0, 0.1, generator=jg)
    model = model.to(dtype)
    disc = MultiDiscriminator(DiscriminatorConfig(periods=[2], n_scales=1, period_channels=[4, 4],
                                                  scale_channels=[4, 4])).to(dtype)
    ext = MelExtractor(mel_cfg).to(dtype)
    g = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    cb = SpeakerCodebook("s", rng.standard_normal((3, 4)).astype(np.float32), True, 30, 1, 0)
    cbt, cb_mask = pad_codebooks([cb], dtype)
    ids = torch.tensor([[1, 2, 3]])
    T = 6
    y_full = (0.5 * torch.randn(1, 1, T * 4, generator=g)).to(dtype)
    mel = ext(y_full[:, 0]).detach()
    noise_d = torch.randn(1, cfg.duration_noise_dim, 3, generator=g).to(dtype)
    starts = [1]
    y = y_full[:, :, 4:20]
    post_noise = torch.randn(1, cfg.inter_channels, T, generator=g).to(dtype)

    def loss_fn():
        out = model.forward_train(ids, torch.tensor([3]), mel, torch.tensor([T]), cbt, cb_mask, starts,
                                  noise_d, posterior_noise=post_noise)
        y_hat = out["y_hat"]
        mel_seg = slice_segments(mel, starts, cfg.segment_frames)
        _, f_real = disc(y)
        d_fake, f_fake = disc(y_hat)
        return (generator_adversarial_loss(d_fake) + feature_matching_loss(f_real, f_fake)
                + cfg.lambda_mel * torch.mean(torch.abs(mel_seg - ext(y_hat[:, 0]))) + out["kl"])

    params = {n: p for n, p in model.named_parameters() if not n.startswith("dp.")}
    return loss_fn, params


def random_param_subset(params, n, rng):
    """``n`` (name, flat index) pairs drawn across all tensors, uniformly over entries."""
    names = list(params)
    sizes = np.array([params[k].numel() for k in names])
    flat = rng.choice(sizes.sum(), size=n, replace=False)
    offsets = np.cumsum(np.r_[0, sizes])
    out = []
    for f in flat:
        t = int(np.searchsorted(offsets, f, side="right") - 1)
        out.append((names[t], int(f - offsets[t])))
    return out


def fd_check_entries(loss_fn, params, entries, eps=1e-6, reference=None):
    """Norm-wise relative error of autograd vs central differences over the
    given (name, flat index) entries; ``reference`` as in ``fd_check``."""
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    fd_loss, fd_params = reference or (loss_fn, params)
    a, n = [], []
    for name, i in entries:
        p = params[name]
        g = p.grad.view(-1)[i] if p.grad is not None else torch.tensor(0.0)
        a.append(float(g))
        flat = fd_params[name].data.view(-1)
        orig = float(flat[i])
        with torch.no_grad():
            flat[i] = orig + eps
            up = float(fd_loss())
            flat[i] = orig - eps
            down = float(fd_loss())
            flat[i] = orig
        n.append((up - down) / (2 * eps))
    a, n = np.array(a), np.array(n)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)), a, n


# ---------------------------------------------------------------------------
# tiny training data


def make_utts(cfg, n=4, seed=0):
    rng = np.random.default_rng(seed)
    hop = cfg.audio.mel.hop_size
    out = []
    for i in range(n):
        T = int(rng.integers(10, 16))
        y = (0.3 * rng.standard_normal(T * hop)).astype(np.float32)
        mel = mel_spectrogram(Waveform(y, 22050), cfg.audio.mel).frames
        out.append(Utterance(f"u{i}", f"s{i % 2}", rng.integers(1, 20, int(rng.integers(3, 7))), y, mel))
    return out


def codebooks(K=5, H=8):
    return {"s0": random_codebook("s0", K, H, 0), "s1": random_codebook("s1", K, H, 1)}


def sfen_checkpoint(cfg):
    rng = np.random.default_rng(0)
    hop = cfg.audio.mel.hop_size
    clips = []
    for i in range(2):
        y = (0.3 * rng.standard_normal(12 * hop)).astype(np.float32)
        clips.append(Clip(f"c{i}", "s", y, mel_spectrogram(Waveform(y, 22050), cfg.audio.mel).frames))
    tr = SfenTrainer(cfg, clips)
    tr.train_step()
    return tr.checkpoint()
