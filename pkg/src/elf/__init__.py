"""ELF speech synthesis: SFEN latents, speaker codebooks, codebook-fused TTS/FTS and blending."""
