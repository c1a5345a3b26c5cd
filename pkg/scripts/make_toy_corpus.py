"""Write the synthetic 2-speaker toy corpus (WAVs + manifest.jsonl) and
optionally preprocess it.

    python scripts/make_toy_corpus.py work/toy --seconds 120 --preprocess
"""
import argparse
import logging

from elf.config import PipelineConfig
from elf.data import make_toy_corpus, preprocess


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--speakers", type=int, default=2)
    ap.add_argument("--seconds", type=float, default=120.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--preprocess", action="store_true", help="also cache mels under <out_dir>/processed")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    manifest = make_toy_corpus(args.out_dir, args.speakers, args.seconds, seed=args.seed)
    print(f"manifest: {manifest}")
    if args.preprocess:
        report = preprocess(manifest, PipelineConfig.toy(), manifest.parent / "processed")
        print(f"processed {len(report.processed)}, skipped {len(report.skipped)}, failed {len(report.failed)}")


if __name__ == "__main__":
    main()
