"""Dataclass configs for every stage plus the cross-module consistency checks.

Defaults are paper scale except where a desk-scale value is the documented
default (latent_dim 64, codebook K 32). ``PipelineConfig.toy()`` gives the
desk-scale configuration used by the scripts and the acceptance suite.

Learning rate: the printed initial rate is read as 2e-4.
"""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .audio import MelConfig
from .vocoder import DecoderConfig, DiscriminatorConfig

DEFAULT_SYMBOLS = "_ abcdefghijklmnopqrstuvwxyz',.?!-"


class ConfigError(ValueError):
    pass


@dataclass
class SfenConfig:
    n_mels: int = 80
    latent_dim: int = 64
    encoder_hidden: int = 512
    encoder_layers: int = 8
    encoder_kernel: int = 5
    encoder_dilation: int = 1
    min_sigma: float = 1e-4
    lambda_sf: float = 45.0
    segment_samples: int = 8192
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def __post_init__(self):
        if self.lambda_sf <= 0:
            raise ConfigError("lambda_sf must be positive")
        if min(self.latent_dim, self.encoder_hidden, self.encoder_layers) <= 0:
            raise ConfigError("sfen dims must be positive")

    @property
    def hop(self) -> int:
        return self.decoder.hop


@dataclass
class TtsConfig:
    text_vocab: str = DEFAULT_SYMBOLS
    d_model: int = 192
    n_text_layers: int = 6
    fusion_layer_index: int = 5
    n_heads: int = 2
    filter_channels: int = 768
    text_kernel: int = 3
    n_codebook_layers: int = 1
    codebook_dim: int = 64
    p_dropout: float = 0.1
    inter_channels: int = 192
    posterior_hidden: int = 192
    posterior_layers: int = 16
    posterior_kernel: int = 5
    flow_blocks: int = 4
    flow_hidden: int = 192
    flow_wn_layers: int = 4
    flow_kernel: int = 5
    flow_transformer_dim: int = 192
    flow_heads: int = 2
    duration_noise_dim: int = 4
    duration_filter: int = 256
    duration_kernel: int = 3
    duration_layers: int = 3
    lambda_dp: float = 1.0
    lambda_mel: float = 45.0
    segment_frames: int = 32
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def __post_init__(self):
        dims = [self.d_model, self.n_text_layers, self.n_heads, self.inter_channels, self.flow_blocks,
                self.flow_hidden, self.flow_transformer_dim, self.duration_noise_dim, self.codebook_dim]
        if min(dims) <= 0:
            raise ConfigError("all tts dims must be positive")
        if not 0 <= self.fusion_layer_index < self.n_text_layers:
            raise ConfigError(
                f"fusion_layer_index {self.fusion_layer_index} out of range for {self.n_text_layers} layers"
            )
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.inter_channels % 2:
            raise ConfigError("inter_channels must be even for coupling splits")
        if self.flow_transformer_dim % self.flow_heads:
            raise ConfigError("flow_transformer_dim must be divisible by flow_heads")
        if len(set(self.text_vocab)) != len(self.text_vocab):
            raise ConfigError("text_vocab has duplicate symbols")


@dataclass
class FtsConfig(TtsConfig):
    # queries from the text stack, keys/values from the codebook stack;
    # the attention-weighted codebook values replace the text features
    substitute_prior: bool = True


@dataclass
class CodebookConfig:
    K: int = 32
    seed: int = 0
    restarts: int = 4
    max_iters: int = 300
    tol: float = 1e-6


@dataclass
class PathsConfig:
    data_root: str = "."
    work_dir: str = "work"


@dataclass
class OptimizerConfig:
    lr: float = 2e-4
    beta1: float = 0.8
    beta2: float = 0.99
    weight_decay: float = 0.01
    lr_decay: float = 0.999
    tts_lr_decay: float = 0.998


@dataclass
class TrainingConfig:
    batch_size: int = 32
    max_steps: int = 800_000
    checkpoint_interval: int = 10_000
    log_interval: int = 1
    seed: int = 1234
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)


@dataclass
class AudioConfig:
    mel: MelConfig = field(default_factory=MelConfig)
    trim_db: float = -40.0


@dataclass
class PipelineConfig:
    audio: AudioConfig = field(default_factory=AudioConfig)
    sfen: SfenConfig = field(default_factory=SfenConfig)
    tts: TtsConfig = field(default_factory=TtsConfig)
    fts: FtsConfig = field(default_factory=FtsConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    @classmethod
    def toy(cls) -> "PipelineConfig":
        """Desk-scale setup: hop 256, H 64, narrow networks."""
        mel = MelConfig(fft_size=1024, window_size=1024, hop_size=256)
        dec = toy_decoder()
        disc = toy_discriminator()
        tts_kw = dict(
            d_model=64, n_text_layers=6, fusion_layer_index=5, n_heads=2, filter_channels=128,
            codebook_dim=64, p_dropout=0.0, inter_channels=16, posterior_hidden=64, posterior_layers=4,
            flow_blocks=2, flow_hidden=64, flow_wn_layers=2, flow_transformer_dim=64,
            duration_filter=64, segment_frames=16, decoder=dec, discriminator=disc,
        )
        return cls(
            audio=AudioConfig(mel=mel),
            sfen=SfenConfig(latent_dim=64, encoder_hidden=64, segment_samples=4096,
                            decoder=toy_decoder(), discriminator=toy_discriminator()),
            tts=TtsConfig(**tts_kw),
            fts=FtsConfig(**{**tts_kw, "decoder": toy_decoder(), "discriminator": toy_discriminator()}),
            codebook=CodebookConfig(K=32),
            training=TrainingConfig(batch_size=4, max_steps=2000, checkpoint_interval=500,
                                    optimizer=OptimizerConfig(lr=1e-3)),
        )

    def validate(self) -> "PipelineConfig":
        validate(self)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def work_dir(self) -> Path:
        return Path(os.environ.get("ELF_WORK_DIR") or self.paths.work_dir)


def toy_decoder() -> DecoderConfig:
    return DecoderConfig(
        upsample_initial_channel=64,
        upsample_factors=[4, 4, 4, 4],
        upsample_kernels=[8, 8, 8, 8],
        resblock_kernels=[3, 5],
        resblock_dilations=[[1, 3], [1, 3]],
    )


def toy_discriminator() -> DiscriminatorConfig:
    return DiscriminatorConfig(periods=[2, 3, 5], n_scales=2, period_channels=[8, 16, 32], scale_channels=[8, 16, 32])


def validate(cfg: PipelineConfig) -> None:
    """Raise ConfigError on any cross-module inconsistency."""
    hop = cfg.audio.mel.hop_size
    problems = []
    if cfg.sfen.n_mels != cfg.audio.mel.n_mels:
        problems.append(f"sfen.n_mels {cfg.sfen.n_mels} != audio.mel.n_mels {cfg.audio.mel.n_mels}")
    for name, dec in (("sfen", cfg.sfen.decoder), ("tts", cfg.tts.decoder), ("fts", cfg.fts.decoder)):
        if dec.hop != hop:
            problems.append(f"{name}.decoder upsample product {dec.hop} != hop_size {hop}")
    if cfg.sfen.segment_samples % hop:
        problems.append("sfen.segment_samples is not a multiple of hop_size")
    if cfg.sfen.segment_samples < cfg.audio.mel.window_size:
        problems.append("sfen.segment_samples shorter than the STFT window")
    for name, t in (("tts", cfg.tts), ("fts", cfg.fts)):
        if t.codebook_dim != cfg.sfen.latent_dim:
            problems.append(f"{name}.codebook_dim {t.codebook_dim} != sfen.latent_dim {cfg.sfen.latent_dim}")
        if not 0 <= t.fusion_layer_index < t.n_text_layers:
            problems.append(f"{name}.fusion_layer_index out of range")
        if t.segment_frames * hop < cfg.audio.mel.window_size:
            problems.append(f"{name}.segment_frames too short for the STFT window")
    if cfg.codebook.K < 1:
        problems.append("codebook.K must be >= 1")
    if problems:
        raise ConfigError("; ".join(problems))


# ---------------------------------------------------------------------------
# dict / file round trip


def _build(cls, data):
    if not dataclasses.is_dataclass(cls):
        return data
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"expected mapping for {cls.__name__}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value)
        elif hint is float and isinstance(value, (str, int)) and not isinstance(value, bool):
            # YAML 1.1 reads "1e-3" as a string
            try:
                value = float(value)
            except ValueError as exc:
                raise ConfigError(f"{cls.__name__}.{key}: expected a number, got {value!r}") from exc
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def from_dict(data: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    merged = _deep_merge((base or PipelineConfig()).to_dict(), data or {})
    return _build(PipelineConfig, merged)


def _deep_merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` strings; values are parsed as YAML scalars."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {key!r} crosses a leaf")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path=None, overrides: list[str] | None = None, base: PipelineConfig | None = None) -> PipelineConfig:
    data = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    if overrides:
        data = apply_overrides(data, overrides)
    cfg = from_dict(data, base=base)
    validate(cfg)
    return cfg


def save_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
