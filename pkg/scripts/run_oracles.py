"""Chained toy-scale training oracles on the synthetic corpus:

1. SFEN on 2 speakers / 2 minutes (H=64, hop 256): recon term must drop 50%
   from its first-100-step average within 2000 steps.
2. Codebooks from the trained SFEN, then TTS (decoder and discriminators
   initialised from SFEN) overfit on 10 utterances: mel term -60% within
   5000 steps and duration MSE lower than at the start.
3. FTS from random initialisation, same criterion.

Writes results.json and checkpoints under the output directory.

    python scripts/run_oracles.py work/oracles
"""
import argparse
import json
import logging
from pathlib import Path

from elf.codebook import save_codebook
from elf.config import PipelineConfig, load_config
from elf.data import load_clips, load_utterances, make_toy_corpus, preprocess
from elf.experiments import sfen_oracle, speaker_codebooks, tts_oracle
from elf.text import Tokenizer


def pick_utterances(utts, n):
    by_spk = {}
    for u in utts:
        by_spk.setdefault(u.speaker_id, []).append(u)
    per = max(1, n // len(by_spk))
    return [u for group in by_spk.values() for u in group[:per]][:n]


def main():
    ap = argparse.ArgumentParser(description="toy training oracles")
    ap.add_argument("out_dir")
    ap.add_argument("--config", help="YAML overrides on top of the toy preset")
    ap.add_argument("--sfen-steps", type=int, default=2000)
    ap.add_argument("--tts-steps", type=int, default=5000)
    ap.add_argument("--utterances", type=int, default=10)
    ap.add_argument("--only", choices=("sfen", "tts", "fts"), action="append")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out_dir)
    cfg = load_config(args.config, base=PipelineConfig.toy()) if args.config else PipelineConfig.toy()
    manifest = make_toy_corpus(out / "corpus", n_speakers=2, total_seconds=120, seed=0)
    preprocess(manifest, cfg, out / "processed")
    clips = load_clips(out / "processed")
    results = {}

    sfen, res = sfen_oracle(cfg, clips, args.sfen_steps, 0.5, out / "sfen")
    sfen.save(out / "sfen" / "latest.elfk")
    results["sfen"] = {**res.__dict__, "reduction": res.reduction}
    print("sfen", "PASS" if res.passed else "FAIL", res.line())

    cbs = speaker_codebooks(sfen.model, clips, cfg.codebook.K, cfg.codebook.seed)
    for spk, cb in cbs.items():
        save_codebook(cb, out / "codebooks" / f"{spk}.elfc")
    utts = pick_utterances(load_utterances(out / "processed", Tokenizer(cfg.tts.text_vocab)), args.utterances)

    for kind in ("tts", "fts"):
        if args.only and kind not in args.only:
            continue
        init = sfen.checkpoint() if kind == "tts" else None
        tr, res = tts_oracle(cfg, utts, cbs, kind, args.tts_steps, 0.6, sfen_ckpt=init, work_dir=out / kind)
        tr.save(out / kind / "latest.elfk")
        results[kind] = {**res.__dict__, "reduction": res.reduction}
        print(kind, "PASS" if res.passed else "FAIL", res.line(),
              f"dur_mse {res.extra['dur_mse_baseline']:.3f} -> {res.extra['dur_mse_final']:.3f}")

    (out / "results.json").write_text(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
