"""Feature-to-speech variant: the prior pathway carries only attention-weighted
codebook vectors. Text features choose the weights and nothing else."""
from __future__ import annotations

import math

import torch
from torch import nn

from .codebook import SpeakerCodebook
from .config import FtsConfig, PipelineConfig
from .modules import MultiHeadAttention, TransformerBlock, sequence_mask, sinusoidal_positions
from .text import PhonemeSequence
from .tts import CodebookEncoder, TtsTrainer, Utterance, _ids_tensor, pad_codebooks, synthesize


class FtsPriorEncoder(nn.Module):
    """Queries from the text transformer stack, keys and values from the
    codebook transformer. Per-head attention weights are averaged into one
    (L, K) row-stochastic matrix that mixes the codebook values, so each
    output row is a convex combination of the K value vectors."""

    def __init__(self, cfg: FtsConfig):
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
        self.score = MultiHeadAttention(d, cfg.n_heads)
        self.proj = nn.Conv1d(d, 2 * cfg.inter_channels, 1)
        self.detach_values = False
        self.detach_weights = False
        self.last_weights = None

    def text_features(self, ids, lengths):
        mask = sequence_mask(lengths, ids.shape[1])
        h = self.emb(ids) * math.sqrt(self.cfg.d_model)
        h = (h + sinusoidal_positions(ids.shape[1], self.cfg.d_model, h.dtype)[None]) * mask[..., None].to(h.dtype)
        for layer in self.layers:
            h = layer(h, mask)
        return h, mask

    def values(self, cb, cb_mask):
        return self.cb_enc(cb, cb_mask)

    def combine(self, q, s, cb_mask):
        w = self.score.probs(q, s, cb_mask).mean(dim=1)  # (B, L, K)
        if self.detach_weights:
            w = w.detach()
        v = s.detach() if self.detach_values else s
        self.last_weights = w
        return torch.matmul(w, v)

    def forward(self, ids, lengths, cb, cb_mask):
        q, mask = self.text_features(ids, lengths)
        s = self.values(cb, cb_mask)
        h = self.combine(q, s, cb_mask)
        m = mask[:, None, :].to(h.dtype)
        h_text = h.transpose(1, 2) * m
        stats = self.proj(h_text) * m
        m_p, logs_p = torch.split(stats, self.cfg.inter_channels, dim=1)
        return h_text, m_p, logs_p, m


def fts_prior(model, p: PhonemeSequence, cb: SpeakerCodebook):
    """(L, d) attention-weighted codebook features and the (K, d) value vectors."""
    enc = model.enc_p if hasattr(model, "enc_p") else model
    ids = _ids_tensor(p)
    dtype = next(enc.parameters()).dtype
    cbt, cb_mask = pad_codebooks([cb], dtype)
    q, _ = enc.text_features(ids, torch.tensor([ids.shape[1]]))
    s = enc.values(cbt, cb_mask)
    h = enc.combine(q, s, cb_mask)
    return h[0], s[0]


def train_fts(cfg: PipelineConfig, utterances: list[Utterance], codebooks: dict[str, SpeakerCodebook],
              max_steps: int | None = None, work_dir=None, callback=None) -> TtsTrainer:
    """Random initialisation only; no parameters are taken from SFEN."""
    trainer = TtsTrainer(cfg, utterances, codebooks, kind="fts", work_dir=work_dir)
    return trainer.train(max_steps, callback)


def synthesize_fts(model, p, cb, duration_noise_scale=1.0, prior_noise_scale=0.667, seed=0, **kw):
    if model.kind != "fts":
        raise ValueError("synthesize_fts needs a feature-to-speech model")
    return synthesize(model, p, cb, duration_noise_scale, prior_noise_scale, seed, **kw)
