"""Speaker blending: a convex combination of per-speaker fused features at
the fusion layer of the prior encoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .codebook import SpeakerCodebook, load_codebook
from .text import PhonemeSequence, TextError
from .tts import TtsModel, _finish, _ids_tensor, pad_codebooks

RENORM_TOL = 1e-3


class BlendSpecError(ValueError):
    pass


@dataclass
class BlendSpec:
    entries: list[tuple[SpeakerCodebook, float]] = field(default_factory=list)

    @property
    def proportions(self) -> np.ndarray:
        return np.array([p for _, p in self.entries], dtype=np.float64)

    @property
    def codebooks(self) -> list[SpeakerCodebook]:
        return [cb for cb, _ in self.entries]


def validate_blend_spec(spec: BlendSpec) -> BlendSpec:
    if not spec.entries:
        raise BlendSpecError("blend spec is empty")
    p = spec.proportions
    if np.any(~np.isfinite(p)) or np.any(p < 0):
        raise BlendSpecError(f"proportions must be finite and non-negative, got {p.tolist()}")
    total = p.sum()
    if abs(total - 1.0) > RENORM_TOL:
        raise BlendSpecError(f"proportions sum to {total}, not 1")
    H = {cb.H for cb in spec.codebooks}
    if len(H) != 1:
        raise BlendSpecError(f"codebooks have different latent dims {sorted(H)}")
    if total != 1.0:
        p = p / total
    return BlendSpec([(cb, float(w)) for cb, w in zip(spec.codebooks, p)])


def parse_blend(text: str) -> BlendSpec:
    """``"a.elfc:0.8,b.elfc:0.2"`` -> validated spec (codebooks loaded from disk)."""
    entries = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        path, sep, weight = item.rpartition(":")
        if not sep or not path:
            raise BlendSpecError(f"blend entry {item!r} is not path:weight")
        try:
            w = float(weight)
        except ValueError as exc:
            raise BlendSpecError(f"bad weight in {item!r}") from exc
        entries.append((load_codebook(path), w))
    return validate_blend_spec(BlendSpec(entries))


def load_blend_file(path) -> BlendSpec:
    """YAML/JSON list of ``{codebook_path, proportion}`` records."""
    import yaml

    with open(path, encoding="utf-8") as fh:
        items = yaml.safe_load(fh)
    if not isinstance(items, list):
        raise BlendSpecError("blend file must contain a list")
    return validate_blend_spec(
        BlendSpec([(load_codebook(it["codebook_path"]), float(it["proportion"])) for it in items])
    )


def per_speaker_fused(model: TtsModel, h_prev, mask, spec: BlendSpec) -> list[torch.Tensor]:
    dtype = h_prev.dtype
    out = []
    for cb in spec.codebooks:
        cbt, cb_mask = pad_codebooks([cb] * h_prev.shape[0], dtype)
        out.append(model.enc_p.fuse(h_prev, mask, cbt, cb_mask))
    return out


def blend_fused_features(model: TtsModel, h_prev, mask, spec: BlendSpec) -> torch.Tensor:
    """h_prev: (B, L, d) pre-fusion feature -> sum_i p_i * fuse(h_prev, c_i)."""
    spec = validate_blend_spec(spec)
    fused = per_speaker_fused(model, h_prev, mask, spec)
    out = None
    for (cb, p), h in zip(spec.entries, fused):
        term = h * p
        out = term if out is None else out + term
    return out


def synthesize_blend(model: TtsModel, p: PhonemeSequence, spec: BlendSpec, duration_noise_scale: float = 1.0,
                     prior_noise_scale: float = 0.667, seed: int = 0, sample_rate: int = 22050,
                     durations_hook=None):
    if model.kind != "tts":
        raise ValueError("blending needs a tts model")
    if p is None or len(getattr(p, "ids", p)) == 0:
        raise TextError("empty phoneme sequence")
    model.eval()
    ids = _ids_tensor(p)
    with torch.no_grad():
        h, mask = model.enc_p.pre_fusion(ids, torch.tensor([ids.shape[1]]))
        h = blend_fused_features(model, h, mask, spec)
        h_text, m_p, logs_p, x_mask = model.enc_p.post_fusion(h, mask)
    wav, _ = _finish(model, h_text, m_p, logs_p, x_mask, duration_noise_scale, prior_noise_scale, seed,
                     sample_rate, durations_hook)
    return wav
