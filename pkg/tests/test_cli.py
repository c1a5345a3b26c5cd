import json

import numpy as np
import pytest

from elf.cli import (
    EXIT_INVALID,
    EXIT_OK,
    EXIT_PARTIAL,
    cosine_similarity,
    decode_latents,
    encode_latents,
    main,
)
from elf.codebook import load_codebook
from elf.config import save_config
from elf.data import ManifestRecord, make_toy_corpus, read_manifest, write_manifest

from conftest import micro_config


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A full micro pipeline driven through the CLI: preprocess, SFEN,
    codebooks and a TTS model, a couple of steps each."""
    root = tmp_path_factory.mktemp("cli")
    mp = pytest.MonkeyPatch()
    mp.setenv("ELF_WORK_DIR", str(root / "work"))
    save_config(micro_config(), root / "micro.yaml")
    manifest = make_toy_corpus(root / "corpus", n_speakers=2, total_seconds=8, seed=0)
    c = ["--config", str(root / "micro.yaml")]
    assert main(["preprocess", "--manifest", str(manifest), *c]) == EXIT_OK
    assert main(["train-sfen", "--max-steps", "2", *c]) == EXIT_OK
    assert main(["build-codebook", "--all", *c]) == EXIT_OK
    assert main(["train-tts", "--max-steps", "2", *c]) == EXIT_OK
    yield root, c, manifest
    mp.undo()


def test_pipeline_artifacts(work):
    root, _, _ = work
    w = root / "work"
    assert (w / "sfen" / "latest.elfk").exists() and (w / "tts" / "latest.elfk").exists()
    assert {load_codebook(p).speaker_id for p in (w / "codebooks").glob("*.elfc")} == {"spk0", "spk1"}


def test_preprocess_rerun_reports_up_to_date(work, capsys):
    root, c, manifest = work
    assert main(["preprocess", "--manifest", str(manifest), *c]) == EXIT_OK
    assert "processed 0" in capsys.readouterr().out


def test_preprocess_partial_failure(work, tmp_path):
    root, c, manifest = work
    recs = read_manifest(manifest)[:2] + [ManifestRecord("bad", "spk0", str(tmp_path / "nope.wav"), "x")]
    write_manifest(tmp_path / "m.jsonl", recs)
    code = main(["preprocess", "--manifest", str(tmp_path / "m.jsonl"), "--out", str(tmp_path / "p"), *c])
    assert code == EXIT_PARTIAL


def test_synth_byte_identical(work, tmp_path, capsys):
    root, c, _ = work
    cb = root / "work" / "codebooks" / "spk0.elfc"
    args = ["synth", "--text", "a red fox", "--codebook", str(cb), "--seed", "3", *c]
    assert main([*args, "--out", str(tmp_path / "a.wav")]) == EXIT_OK
    assert main([*args, "--out", str(tmp_path / "b.wav")]) == EXIT_OK
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()
    assert "samples" in capsys.readouterr().out


def test_synth_blend(work, tmp_path):
    root, c, _ = work
    cbs = root / "work" / "codebooks"
    blend = f"{cbs / 'spk0.elfc'}:0.8,{cbs / 'spk1.elfc'}:0.2"
    assert main(["synth", "--text", "a red fox", "--blend", blend, "--out", str(tmp_path / "b.wav"), *c]) == EXIT_OK
    bad = f"{cbs / 'spk0.elfc'}:0.5,{cbs / 'spk1.elfc'}:0.2"
    assert main(["synth", "--text", "a red fox", "--blend", bad, "--out", str(tmp_path / "x.wav"), *c]) == EXIT_INVALID


@pytest.mark.parametrize("argv", [
    ["synth", "--text", "a", "--out", "x.wav"],  # no codebook
    ["synth", "--text", "###", "--codebook", "missing.elfc", "--out", "x.wav"],
    ["synth", "--text", "a", "--model", "fts", "--codebook", "c.elfc", "--out", "x.wav"],  # no fts checkpoint
    ["build-codebook", "nobody"],
    ["build-codebook"],
    ["export-latents", "nobody", "--out", "x.elfl"],
    ["train-tts", "--resume", "missing.elfk"],
    ["train-sfen", "--set", "audio.mel.hop_size=7"],
    ["no-such-command"],
])
def test_invalid_input_exit_code(work, argv):
    _, c, _ = work
    assert main([*argv, *c]) == EXIT_INVALID


def test_build_codebook_deterministic(work, tmp_path, capsys):
    root, c, _ = work
    assert main(["build-codebook", "spk1", "--out-dir", str(tmp_path), *c]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out.strip())
    assert summary["speaker_id"] == "spk1"
    assert (tmp_path / "spk1.elfc").read_bytes() == (root / "work" / "codebooks" / "spk1.elfc").read_bytes()


def test_export_latents(work, tmp_path):
    _, c, _ = work
    out = tmp_path / "spk0.elfl"
    assert main(["export-latents", "spk0", "--out", str(out), *c]) == EXIT_OK
    spk, mu, sigma = decode_latents(out.read_bytes())
    assert spk == "spk0" and mu.shape == sigma.shape and mu.shape[1] == 8
    assert np.all(sigma > 0)


def test_resume_continues(work):
    root, c, _ = work
    assert main(["train-tts", "--max-steps", "3", "--resume", *c]) == EXIT_OK
    from elf.checkpoint import load_checkpoint

    assert load_checkpoint(root / "work" / "tts" / "latest.elfk").meta["step"] == 3


def test_latent_roundtrip_and_crc():
    rng = np.random.default_rng(0)
    mu, sigma = rng.standard_normal((7, 3)), rng.uniform(0.1, 1, (7, 3))
    data = encode_latents("spk ü", mu, sigma)
    spk, m, s = decode_latents(data)
    assert spk == "spk ü"
    np.testing.assert_array_equal(m, mu.astype(np.float32))
    np.testing.assert_array_equal(s, sigma.astype(np.float32))
    bad = bytearray(data)
    bad[-10] ^= 1
    with pytest.raises(ValueError):
        decode_latents(bytes(bad))


def test_cosine(tmp_path, capsys):
    np.save(tmp_path / "a.npy", np.array([1.0, 2.0, 3.0]))
    (tmp_path / "b.txt").write_text("2, 4, 6\n")
    (tmp_path / "z.txt").write_text("0 0 0")
    assert main(["cosine", str(tmp_path / "a.npy"), str(tmp_path / "b.txt")]) == EXIT_OK
    assert float(capsys.readouterr().out) == pytest.approx(1.0)
    assert main(["cosine", str(tmp_path / "a.npy"), str(tmp_path / "z.txt")]) == EXIT_INVALID
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 0], [-2, 0]) == -1.0


def test_latent_payload_size():
    data = encode_latents("s", np.zeros((60, 64)), np.ones((60, 64)))
    header = 4 + 4 + 4 + 1 + 4 + 4
    assert len(data) == header + 2 * 60 * 64 * 4 + 4
