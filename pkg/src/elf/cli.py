"""``elf`` command line.

Exit codes: 0 success, 1 configuration or input validation error, 2 runtime
failure, 3 partial failure (a report lists what went wrong).
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import struct
import sys
import zlib
from pathlib import Path

import numpy as np

from .config import ConfigError, PipelineConfig, load_config

log = logging.getLogger("elf")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3

LATENT_MAGIC = b"ELFL"
LATENT_VERSION = 1


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# latent dumps and vector files


def encode_latents(speaker_id: str, mu: np.ndarray, sigma: np.ndarray) -> bytes:
    """ELFL: magic, version u32, speaker (u32 length + UTF-8), H u32, N u32,
    mu then sigma as row-major f32 LE, trailing CRC-32."""
    if mu.shape != sigma.shape or mu.ndim != 2:
        raise ValueError("mu and sigma must be matching (N, H) matrices")
    n, h = mu.shape
    name = speaker_id.encode("utf-8")
    buf = io.BytesIO()
    buf.write(LATENT_MAGIC)
    buf.write(struct.pack("<I", LATENT_VERSION))
    buf.write(struct.pack("<I", len(name)) + name)
    buf.write(struct.pack("<II", h, n))
    buf.write(np.ascontiguousarray(mu, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(sigma, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_latents(data: bytes) -> tuple[str, np.ndarray, np.ndarray]:
    if len(data) < 20 or data[:4] != LATENT_MAGIC:
        raise ValueError("not a latent dump")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ValueError("latent dump checksum mismatch")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != LATENT_VERSION:
        raise ValueError(f"unsupported latent dump version {version}")
    (n_name,) = struct.unpack_from("<I", body, 8)
    speaker = body[12 : 12 + n_name].decode("utf-8")
    pos = 12 + n_name
    h, n = struct.unpack_from("<II", body, pos)
    pos += 8
    size = n * h * 4
    if len(body) != pos + 2 * size:
        raise ValueError("latent dump has the wrong payload size")
    mu = np.frombuffer(body, "<f4", n * h, pos).reshape(n, h).astype(np.float32)
    sigma = np.frombuffer(body, "<f4", n * h, pos + size).reshape(n, h).astype(np.float32)
    return speaker, mu, sigma


def read_vector(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        v = np.load(path)
    else:
        v = np.array(path.read_text(encoding="utf-8").replace(",", " ").split(), dtype=np.float64)
    return np.asarray(v, dtype=np.float64).ravel()


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"vector lengths differ: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> PipelineConfig:
    base = PipelineConfig() if args.preset == "paper" else PipelineConfig.toy()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"training.seed={args.seed}")
    try:
        return load_config(args.config, overrides, base=base)
    except (ConfigError, OSError) as exc:
        raise CliError(f"invalid configuration: {exc}") from exc


def _processed(cfg):
    from .data import processed_dir

    d = processed_dir(cfg)
    if not (d / "index.json").exists():
        raise CliError(f"no preprocessed data under {d}; run `elf preprocess` first")
    return d


def _sfen_path(cfg, explicit) -> Path:
    p = Path(explicit) if explicit else cfg.work_dir / "sfen" / "latest.elfk"
    if not p.exists():
        raise CliError(f"SFEN checkpoint {p} not found")
    return p


def _resume_path(args, run_dir: Path):
    if not args.resume:
        return None
    p = run_dir / "latest.elfk" if args.resume == "auto" else Path(args.resume)
    if not p.exists():
        raise CliError(f"resume checkpoint {p} not found")
    return p


def _codebook_dir(cfg, explicit=None) -> Path:
    return Path(explicit) if explicit else cfg.work_dir / "codebooks"


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    from .data import ManifestError, preprocess

    cfg = _config(args)
    try:
        report = preprocess(args.manifest, cfg, args.out, jobs=args.jobs)
    except (ManifestError, OSError) as exc:
        raise CliError(str(exc)) from exc
    print(f"processed {len(report.processed)}, up to date {len(report.skipped)}, failed {len(report.failed)}")
    for cid, reason in report.failed:
        print(f"FAILED {cid}: {reason}")
    if report.failed:
        return EXIT_PARTIAL if (report.processed or report.skipped) else EXIT_RUNTIME
    return EXIT_OK


def _progress(every: int):
    def cb(trainer, terms):
        if every and trainer.step % every == 0:
            print(f"step {trainer.step} " + " ".join(f"{k}={v:.4f}" for k, v in terms.items()), flush=True)
        return False

    return cb


def cmd_train_sfen(args) -> int:
    from .data import load_clips
    from .sfen import train_sfen

    cfg = _config(args)
    clips = load_clips(_processed(cfg))
    run_dir = cfg.work_dir / "sfen"
    run_dir.mkdir(parents=True, exist_ok=True)
    trainer = train_sfen(cfg, clips, args.max_steps, run_dir, _resume_path(args, run_dir), _progress(args.print_every))
    trainer.save(run_dir / "latest.elfk")
    print(f"sfen trained to step {trainer.step}; checkpoint {run_dir / 'latest.elfk'}")
    return EXIT_OK


def _load_codebooks(cfg, speakers, cb_dir) -> dict:
    from .codebook import load_codebook

    out, missing = {}, []
    for spk in sorted(speakers):
        p = cb_dir / f"{spk}.elfc"
        if p.exists():
            out[spk] = load_codebook(p)
        else:
            missing.append(spk)
    if missing:
        raise CliError(f"missing codebooks for {missing} in {cb_dir}; run `elf build-codebook --all`")
    return out


def _train_acoustic(args, kind: str) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_utterances
    from .text import Tokenizer
    from .tts import TtsTrainer

    cfg = _config(args)
    mcfg = cfg.fts if kind == "fts" else cfg.tts
    utts = load_utterances(_processed(cfg), Tokenizer(mcfg.text_vocab), limit=args.limit)
    if not utts:
        raise CliError("no transcribed clips available for training")
    codebooks = _load_codebooks(cfg, {u.speaker_id for u in utts}, _codebook_dir(cfg, args.codebook_dir))
    run_dir = cfg.work_dir / kind
    run_dir.mkdir(parents=True, exist_ok=True)
    trainer = TtsTrainer(cfg, utts, codebooks, kind=kind, work_dir=run_dir)
    resume = _resume_path(args, run_dir)
    if resume is not None:
        trainer.restore(load_checkpoint(resume, kind))
    elif getattr(args, "init_from_sfen", None):
        names = trainer.init_from_sfen(load_checkpoint(args.init_from_sfen, "sfen"))
        print(f"initialised {len(names)} tensors from {args.init_from_sfen}")
    trainer.train(args.max_steps, _progress(args.print_every))
    trainer.save(run_dir / "latest.elfk")
    print(f"{kind} trained to step {trainer.step}; checkpoint {run_dir / 'latest.elfk'}")
    return EXIT_OK


def cmd_train_tts(args) -> int:
    return _train_acoustic(args, "tts")


def cmd_train_fts(args) -> int:
    return _train_acoustic(args, "fts")


def _build_one(spk, mels, sfen_path, K, seed, restarts, max_iters, tol, out_path):
    from .codebook import build_codebook, extract_mu_frames, save_codebook
    from .sfen import load_sfen

    model, _ = load_sfen(sfen_path)
    frames = extract_mu_frames(spk, mels, model)
    cb = build_codebook(frames, K, seed, restarts=restarts, max_iters=max_iters, tol=tol)
    save_codebook(cb, out_path)
    return {"speaker_id": spk, "n_frames": frames.n_frames, "K": cb.K, "clustered": cb.clustered,
            "path": str(out_path)}


def cmd_build_codebook(args) -> int:
    from .data import load_index, speaker_mels

    cfg = _config(args)
    proc = _processed(cfg)
    known = sorted(load_index(proc)["speakers"])
    if args.all:
        speakers = known
    elif args.speaker:
        unknown = [s for s in args.speaker if s not in known]
        if unknown:
            raise CliError(f"unknown speaker(s) {unknown}; known speakers: {known}")
        speakers = args.speaker
    else:
        raise CliError("name one or more speakers or pass --all")
    sfen_path = _sfen_path(cfg, args.sfen)
    out_dir = _codebook_dir(cfg, args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    c = cfg.codebook
    jobs_args = [(s, speaker_mels(proc, s), str(sfen_path), c.K, c.seed, c.restarts, c.max_iters, c.tol,
                  out_dir / f"{s}.elfc") for s in speakers]
    if args.jobs > 1 and len(jobs_args) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            summaries = list(pool.map(_build_one, *zip(*jobs_args)))
    else:
        summaries = [_build_one(*a) for a in jobs_args]
    for s in summaries:
        print(json.dumps(s))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .audio import save_wav
    from .blending import BlendSpecError, load_blend_file, parse_blend, synthesize_blend
    from .checkpoint import CheckpointError, load_checkpoint
    from .codebook import load_codebook
    from .text import TextError, Tokenizer
    from .tts import load_tts, synthesize_with_durations

    cfg = _config(args)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else cfg.work_dir / args.model / "latest.elfk"
    if not ckpt_path.exists():
        raise CliError(f"checkpoint {ckpt_path} not found")
    try:
        model, mcfg_all = load_tts(load_checkpoint(ckpt_path), args.model)
    except CheckpointError as exc:
        raise CliError(f"cannot use {ckpt_path}: {exc}") from exc
    mcfg = mcfg_all.fts if args.model == "fts" else mcfg_all.tts
    sr = mcfg_all.audio.mel.sample_rate
    hop = mcfg_all.audio.mel.hop_size
    try:
        p = Tokenizer(mcfg.text_vocab).encode(args.text)
    except TextError as exc:
        raise CliError(str(exc)) from exc
    seed = args.seed if args.seed is not None else 0
    kw = dict(duration_noise_scale=args.duration_noise, prior_noise_scale=args.prior_noise, seed=seed,
              sample_rate=sr)
    try:
        if args.blend or args.blend_file:
            if args.model != "tts":
                raise CliError("blending is only defined for the tts model")
            spec = parse_blend(args.blend) if args.blend else load_blend_file(args.blend_file)
            wav = synthesize_blend(model, p, spec, **kw)
        else:
            if not args.codebook:
                raise CliError("pass --codebook or --blend")
            if not Path(args.codebook).exists():
                raise CliError(f"codebook {args.codebook} not found")
            wav, _ = synthesize_with_durations(model, p, load_codebook(args.codebook), **kw)
    except (BlendSpecError, FileNotFoundError) as exc:
        raise CliError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_wav(out, wav)
    print(f"wrote {out}: {len(wav)} samples, {len(wav) // hop} frames, {len(wav) / sr:.3f} s")
    return EXIT_OK


def cmd_export_latents(args) -> int:
    from .data import speaker_mels
    from .sfen import encode, load_sfen

    cfg = _config(args)
    try:
        mels = speaker_mels(_processed(cfg), args.speaker)
    except KeyError as exc:
        raise CliError(str(exc.args[0])) from exc
    model, _ = load_sfen(_sfen_path(cfg, args.sfen))
    mus, sigmas = [], []
    for _, mel in mels:
        d = encode(model, mel)
        mus.append(d.mu.detach().float().numpy())
        sigmas.append(d.sigma.detach().float().numpy())
    mu, sigma = np.concatenate(mus), np.concatenate(sigmas)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_bytes(encode_latents(args.speaker, mu, sigma))
    print(f"wrote {args.out}: speaker {args.speaker}, N={mu.shape[0]}, H={mu.shape[1]}")
    return EXIT_OK


def cmd_cosine(args) -> int:
    try:
        print(f"{cosine_similarity(read_vector(args.a), read_vector(args.b)):.6f}")
    except (ValueError, OSError) as exc:
        raise CliError(str(exc)) from exc
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--preset", choices=("toy", "paper"), default="toy",
                        help="defaults the config file is merged onto (default: toy)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
    common.add_argument("--seed", type=int, help="training seed, or the sampling seed for synth")
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="elf", description="ELF speech synthesis pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="trim, resample and cache mels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="output directory (default <work_dir>/processed)")
    p.set_defaults(func=cmd_preprocess)

    for name, func in (("train-sfen", cmd_train_sfen), ("train-tts", cmd_train_tts), ("train-fts", cmd_train_fts)):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--max-steps", type=int)
        p.add_argument("--resume", nargs="?", const="auto", help="checkpoint path (default: latest in run dir)")
        p.add_argument("--print-every", type=int, default=100)
        if name != "train-sfen":
            p.add_argument("--codebook-dir")
            p.add_argument("--limit", type=int, help="use only the first N transcribed clips")
        if name == "train-tts":
            p.add_argument("--init-from-sfen", metavar="CKPT")
        p.set_defaults(func=func)

    p = sub.add_parser("build-codebook", parents=[common])
    p.add_argument("speaker", nargs="*")
    p.add_argument("--all", action="store_true")
    p.add_argument("--sfen", help="SFEN checkpoint (default <work_dir>/sfen/latest.elfk)")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_build_codebook)

    p = sub.add_parser("synth", parents=[common])
    p.add_argument("--text", required=True)
    p.add_argument("--model", choices=("tts", "fts"), default="tts")
    p.add_argument("--checkpoint")
    p.add_argument("--codebook")
    p.add_argument("--blend", help='inline spec "a.elfc:0.8,b.elfc:0.2"')
    p.add_argument("--blend-file")
    p.add_argument("--duration-noise", type=float, default=1.0)
    p.add_argument("--prior-noise", type=float, default=0.667)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export-latents", parents=[common])
    p.add_argument("speaker")
    p.add_argument("--out", required=True)
    p.add_argument("--sfen")
    p.set_defaults(func=cmd_export_latents)

    p = sub.add_parser("cosine", parents=[common])
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_cosine)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; that code is reserved for runtime failures here
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
