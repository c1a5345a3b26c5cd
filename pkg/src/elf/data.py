"""Manifest handling, the preprocessing cache, and a synthetic toy corpus.

Processed layout under ``<work_dir>/processed``::

    index.json               clip and speaker index with content hashes
    audio/<clip_id>.npy      trimmed, resampled float32 samples
    mel/<clip_id>.npy        (T, n_mels) float32 log-mel

Stored samples are cut to ``T * hop`` so that frame ``t`` covers samples
``[t * hop, (t + 1) * hop)``.
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform, load_waveform, mel_spectrogram, save_wav, trim_silence
from .config import PipelineConfig
from .sfen import Clip
from .text import Tokenizer
from .tts import Utterance

log = logging.getLogger(__name__)

INDEX_NAME = "index.json"


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRecord:
    clip_id: str
    speaker_id: str
    path: str
    transcript: str = ""


def read_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = ManifestRecord(str(obj["clip_id"]), str(obj["speaker_id"]), str(obj["path"]),
                                     str(obj.get("transcript", "")))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ManifestError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
            if not Path(rec.path).is_absolute():
                rec.path = str(path.parent / rec.path)
            records.append(rec)
    ids = [r.clip_id for r in records]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate clip ids in manifest")
    if not records:
        raise ManifestError(f"{path}: manifest is empty")
    return records


def write_manifest(path, records: list[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")


def _content_hash(path: str, settings: dict) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(settings, sort_keys=True).encode())
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _process_one(rec: ManifestRecord, cfg_dict: dict, trim_db: float, out_dir: str) -> dict:
    from .audio import MelConfig

    mcfg = MelConfig(**cfg_dict)
    w = load_waveform(rec.path, mcfg.sample_rate)
    w = trim_silence(w, trim_db)
    n_frames = len(w) // mcfg.hop_size
    w = Waveform(w.samples[: n_frames * mcfg.hop_size], w.sample_rate)
    mel = mel_spectrogram(w, mcfg)
    out = Path(out_dir)
    np.save(out / "audio" / f"{rec.clip_id}.npy", w.samples)
    np.save(out / "mel" / f"{rec.clip_id}.npy", mel.frames.astype(np.float32))
    return {"n_samples": len(w), "n_frames": int(mel.frames.shape[0])}


@dataclass
class PreprocessReport:
    processed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failed


def processed_dir(cfg: PipelineConfig) -> Path:
    return cfg.work_dir / "processed"


def load_index(out_dir) -> dict:
    p = Path(out_dir) / INDEX_NAME
    if not p.exists():
        return {"clips": {}, "speakers": {}}
    return json.loads(p.read_text(encoding="utf-8"))


def preprocess(manifest, cfg: PipelineConfig, out_dir=None, jobs: int = 1) -> PreprocessReport:
    """Trim, resample and extract mels for every manifest clip. Entries whose
    source bytes and audio settings are unchanged are skipped."""
    records = read_manifest(manifest) if not isinstance(manifest, list) else manifest
    out = Path(out_dir) if out_dir is not None else processed_dir(cfg)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "mel").mkdir(parents=True, exist_ok=True)
    index = load_index(out)
    mel_dict = cfg.audio.mel.to_dict()
    settings = {"mel": mel_dict, "trim_db": cfg.audio.trim_db}
    report = PreprocessReport()

    todo = []
    for rec in records:
        try:
            digest = _content_hash(rec.path, settings)
        except OSError as exc:
            report.failed.append((rec.clip_id, f"cannot read {rec.path}: {exc}"))
            continue
        prev = index["clips"].get(rec.clip_id)
        if (prev and prev["hash"] == digest and (out / prev["audio"]).exists()
                and (out / prev["mel"]).exists()):
            prev.update(speaker_id=rec.speaker_id, transcript=rec.transcript)
            report.skipped.append(rec.clip_id)
            continue
        todo.append((rec, digest))

    def record(rec, digest, info):
        index["clips"][rec.clip_id] = {
            "speaker_id": rec.speaker_id,
            "transcript": rec.transcript,
            "source": rec.path,
            "hash": digest,
            "audio": f"audio/{rec.clip_id}.npy",
            "mel": f"mel/{rec.clip_id}.npy",
            **info,
        }
        report.processed.append(rec.clip_id)

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(rec, digest, pool.submit(_process_one, rec, mel_dict, cfg.audio.trim_db, str(out)))
                       for rec, digest in todo]
            for rec, digest, fut in futures:
                try:
                    record(rec, digest, fut.result())
                except Exception as exc:  # noqa: BLE001 - isolate per-clip failures
                    report.failed.append((rec.clip_id, f"{type(exc).__name__}: {exc}"))
    else:
        for rec, digest in todo:
            try:
                record(rec, digest, _process_one(rec, mel_dict, cfg.audio.trim_db, str(out)))
            except Exception as exc:  # noqa: BLE001
                report.failed.append((rec.clip_id, f"{type(exc).__name__}: {exc}"))

    failed_ids = {c for c, _ in report.failed}
    for cid in failed_ids:
        index["clips"].pop(cid, None)
    speakers: dict[str, list[str]] = {}
    for rec in records:
        if rec.clip_id in index["clips"]:
            speakers.setdefault(rec.speaker_id, []).append(rec.clip_id)
    index["speakers"] = speakers
    index["failures"] = [{"clip_id": c, "reason": r} for c, r in report.failed]
    tmp = out / (INDEX_NAME + ".tmp")
    tmp.write_text(json.dumps(index, indent=1, sort_keys=True), encoding="utf-8")
    tmp.replace(out / INDEX_NAME)
    return report


def _index_or_raise(out_dir) -> dict:
    index = load_index(out_dir)
    if not index["clips"]:
        raise ManifestError(f"no processed clips under {out_dir}; run preprocess first")
    return index


def _ordered_ids(index: dict, speakers=None) -> list[str]:
    ids = []
    for spk, clip_ids in index["speakers"].items():
        if speakers is None or spk in speakers:
            ids.extend(clip_ids)
    return ids


def load_clips(out_dir, speakers=None) -> list[Clip]:
    index = _index_or_raise(out_dir)
    out = Path(out_dir)
    clips = []
    for cid in _ordered_ids(index, speakers):
        e = index["clips"][cid]
        clips.append(Clip(cid, e["speaker_id"], np.load(out / e["audio"]), np.load(out / e["mel"]),
                          e.get("transcript", "")))
    return clips


def speaker_mels(out_dir, speaker_id: str) -> list[tuple[str, np.ndarray]]:
    index = _index_or_raise(out_dir)
    if speaker_id not in index["speakers"]:
        raise KeyError(f"unknown speaker {speaker_id!r}; known: {sorted(index['speakers'])}")
    out = Path(out_dir)
    return [(cid, np.load(out / index["clips"][cid]["mel"])) for cid in index["speakers"][speaker_id]]


def load_utterances(out_dir, tokenizer: Tokenizer, limit: int | None = None) -> list[Utterance]:
    utts = []
    for clip in load_clips(out_dir):
        if not clip.transcript:
            continue
        ids = tokenizer.encode(clip.transcript).ids
        utts.append(Utterance(clip.clip_id, clip.speaker_id, ids, clip.samples, clip.mel))
        if limit is not None and len(utts) >= limit:
            break
    return utts


# ---------------------------------------------------------------------------
# Toy corpus

_WORDS = ("a bad cat ran far the red fox hid in a box we go to see more of it she had one big dog "
          "my pen is new all day long you can run up here")


def _speaker_voice(k: int) -> dict:
    return {"f0": 110.0 * (1.6**k), "bright": 1.0 + 0.35 * k}


def _char_tone(ch: str, voice: dict, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    if ch == " ":
        return 0.002 * rng.standard_normal(n)
    code = ord(ch) - ord("a") if "a" <= ch <= "z" else 27
    f1 = 300.0 + 40.0 * (code % 13)
    f2 = 900.0 + 90.0 * (code % 11)
    f0 = voice["f0"] * (1.0 + 0.05 * np.sin(2 * np.pi * 3 * t))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    sig = np.zeros(n)
    for h in range(1, 12):
        fh = h * voice["f0"]
        if fh > sr / 2 - 500:
            break
        amp = np.exp(-((fh - f1) / 150.0) ** 2) + 0.6 * np.exp(-((fh - f2) / (200.0 * voice["bright"])) ** 2)
        sig += (amp + 0.02) * np.sin(h * phase)
    if ch in "sfzhx":
        sig = sig * 0.3 + 0.4 * rng.standard_normal(n) * np.linspace(0.5, 1.0, n)
    env = np.minimum(1.0, np.minimum(np.arange(n), np.arange(n)[::-1]) / (0.01 * sr))
    return sig * env


TOY_CHAR_SECONDS = 0.07


def synth_toy_utterance(text: str, speaker_index: int, sr: int, rng: np.random.Generator,
                        char_seconds: float = TOY_CHAR_SECONDS) -> np.ndarray:
    voice = _speaker_voice(speaker_index)
    n = int(char_seconds * sr)
    parts = [np.zeros(int(0.2 * sr))]
    for ch in text:
        parts.append(_char_tone(ch, voice, n, sr, rng))
    parts.append(np.zeros(int(0.2 * sr)))
    y = np.concatenate(parts)
    return (0.5 * y / (np.abs(y).max() + 1e-9)).astype(np.float32)


def make_toy_corpus(out_dir, n_speakers: int = 2, total_seconds: float = 120.0, sample_rate: int = 22050,
                    seed: int = 0, words_per_clip: tuple[int, int] = (3, 6)) -> Path:
    """Synthetic speakers (different pitch and formant brightness) reading
    random word strings. Writes WAVs plus ``manifest.jsonl``; returns its path.

    ``total_seconds`` counts spoken content only, not the silent lead-in and
    tail that preprocessing trims away."""
    out = Path(out_dir)
    (out / "wavs").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    vocab = _WORDS.split()
    records = []
    budget = total_seconds / n_speakers
    for k in range(n_speakers):
        spk = f"spk{k}"
        used, i = 0.0, 0
        while used < budget:
            n_words = int(rng.integers(words_per_clip[0], words_per_clip[1] + 1))
            text = " ".join(rng.choice(vocab, n_words))
            y = synth_toy_utterance(text, k, sample_rate, rng)
            cid = f"{spk}_{i:04d}"
            save_wav(out / "wavs" / f"{cid}.wav", Waveform(y, sample_rate))
            records.append(ManifestRecord(cid, spk, f"wavs/{cid}.wav", text))
            used += len(text) * int(TOY_CHAR_SECONDS * sample_rate) / sample_rate
            i += 1
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest
