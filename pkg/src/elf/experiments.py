"""Toy-scale training oracles shared by scripts/ and the acceptance tests.

A run passes when the trailing moving average of the watched loss term falls
to ``(1 - drop)`` times its baseline, where the baseline is the moving
average over the first ``window`` logged steps. Runs stop as soon as the
criterion holds or the step budget is exhausted.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .codebook import SpeakerCodebook, build_codebook, extract_mu_frames
from .config import PipelineConfig
from .sfen import SFEN, Clip, SfenTrainer
from .tts import TtsTrainer, Utterance

log = logging.getLogger(__name__)


@dataclass
class OracleResult:
    term: str
    baseline: float
    final: float
    steps: int
    seconds: float
    passed: bool
    drop: float
    extra: dict = field(default_factory=dict)

    @property
    def reduction(self) -> float:
        return 1.0 - self.final / self.baseline

    def line(self) -> str:
        return (f"{self.term}: baseline {self.baseline:.4f} -> {self.final:.4f} "
                f"({100 * self.reduction:.1f}% drop, need {100 * self.drop:.0f}%) "
                f"in {self.steps} steps / {self.seconds:.0f}s")


class DropWatcher:
    """Training callback that tracks one loss term against its early baseline."""

    def __init__(self, term: str, drop: float, window: int = 100, check_every: int = 25, also=()):
        self.term = term
        self.drop = drop
        self.window = window
        self.check_every = check_every
        self.also = tuple(also)
        self.values: dict[str, list[float]] = {t: [] for t in (term, *self.also)}
        self.start = time.perf_counter()

    def baseline(self, term=None) -> float:
        return float(np.mean(self.values[term or self.term][: self.window]))

    def current(self, term=None) -> float:
        return float(np.mean(self.values[term or self.term][-self.window :]))

    def met(self) -> bool:
        v = self.values[self.term]
        if len(v) < 2 * self.window:
            return False
        return self.current() <= (1.0 - self.drop) * self.baseline()

    def __call__(self, trainer, terms) -> bool:
        for t in self.values:
            self.values[t].append(terms[t])
        n = len(self.values[self.term])
        if n % 250 == 0:
            log.info("step %d %s MA %.4f (baseline %.4f)", n, self.term, self.current(), self.baseline())
        return n % self.check_every == 0 and self.met()

    def result(self) -> OracleResult:
        extra = {f"{t}_baseline": self.baseline(t) for t in self.also}
        extra.update({f"{t}_final": self.current(t) for t in self.also})
        return OracleResult(self.term, self.baseline(), self.current(), len(self.values[self.term]),
                            time.perf_counter() - self.start, self.met(), self.drop, extra)


def sfen_oracle(cfg: PipelineConfig, clips: list[Clip], max_steps: int = 2000, drop: float = 0.5,
                work_dir=None) -> tuple[SfenTrainer, OracleResult]:
    trainer = SfenTrainer(cfg, clips, work_dir)
    watch = DropWatcher("recon", drop)
    trainer.train(max_steps, watch)
    return trainer, watch.result()


def speaker_codebooks(model: SFEN, clips: list[Clip], K: int, seed: int = 0) -> dict[str, SpeakerCodebook]:
    by_spk: dict[str, list] = {}
    for c in clips:
        by_spk.setdefault(c.speaker_id, []).append((c.clip_id, c.mel))
    out = {}
    for spk, mels in by_spk.items():
        frames = extract_mu_frames(spk, mels, model)
        out[spk] = build_codebook(frames, K, seed)
    return out


def tts_oracle(cfg: PipelineConfig, utterances: list[Utterance], codebooks: dict[str, SpeakerCodebook],
               kind: str = "tts", max_steps: int = 5000, drop: float = 0.6, sfen_ckpt=None,
               work_dir=None, trainer: TtsTrainer | None = None) -> tuple[TtsTrainer, OracleResult]:
    """``trainer`` lets the caller inspect a freshly built model before it trains."""
    if trainer is None:
        trainer = TtsTrainer(cfg, utterances, codebooks, kind=kind, work_dir=work_dir)
    if sfen_ckpt is not None:
        trainer.init_from_sfen(sfen_ckpt)
    watch = DropWatcher("mel", drop, also=("dur_mse",))
    trainer.train(max_steps, watch)
    res = watch.result()
    res.extra["dur_mse_decreased"] = res.extra["dur_mse_final"] < res.extra["dur_mse_baseline"]
    res.passed = res.passed and res.extra["dur_mse_decreased"]
    return trainer, res
