import numpy as np
import pytest
import torch

from elf.audio import MelConfig
from elf.codebook import SpeakerCodebook
from elf.config import AudioConfig, FtsConfig, PipelineConfig, SfenConfig, TrainingConfig, TtsConfig
from elf.vocoder import DecoderConfig, DiscriminatorConfig


def micro_decoder():
    return DecoderConfig(upsample_initial_channel=16, upsample_factors=[4, 4], upsample_kernels=[8, 8],
                         resblock_kernels=[3], resblock_dilations=[[1, 3]])


def micro_disc():
    return DiscriminatorConfig(periods=[2], n_scales=1, period_channels=[4, 8], scale_channels=[4, 8])


def micro_tts_kwargs(H=8):
    return dict(
        d_model=16, n_text_layers=3, fusion_layer_index=2, n_heads=2, filter_channels=32, codebook_dim=H,
        p_dropout=0.0, inter_channels=4, posterior_hidden=8, posterior_layers=2, flow_blocks=1, flow_hidden=8,
        flow_wn_layers=1, flow_transformer_dim=8, duration_filter=8, segment_frames=4,
        decoder=micro_decoder(), discriminator=micro_disc(),
    )


def micro_config(H=8) -> PipelineConfig:
    """hop 16, 16 mels, tiny networks: fast enough for per-test training steps."""
    mel = MelConfig(fft_size=64, window_size=64, hop_size=16, n_mels=16)
    kw = micro_tts_kwargs(H)
    return PipelineConfig(
        audio=AudioConfig(mel=mel),
        sfen=SfenConfig(n_mels=16, latent_dim=H, encoder_hidden=8, encoder_layers=2, segment_samples=64,
                        decoder=micro_decoder(), discriminator=micro_disc()),
        tts=TtsConfig(**kw),
        fts=FtsConfig(**{**kw, "decoder": micro_decoder(), "discriminator": micro_disc()}),
        training=TrainingConfig(batch_size=2, max_steps=4, checkpoint_interval=2),
    ).validate()


def random_codebook(speaker="spk", K=5, H=8, seed=0):
    rng = np.random.default_rng(seed)
    return SpeakerCodebook(speaker, rng.standard_normal((K, H)).astype(np.float32), True, 10 * K, 2, seed)


@pytest.fixture
def micro_cfg():
    return micro_config()


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# ---------------------------------------------------------------------------
# acceptance report: one line per criterion at the end of the run

CRITERIA = [
    ("1", "MAS oracle equivalence"),
    ("2", "KL closed form vs Monte Carlo"),
    ("3", "gradient checks"),
    ("4", "flow integrity"),
    ("5", "clustering oracle"),
    ("6", "blending algebra"),
    ("7", "fusion invariances"),
    ("8a", "SFEN toy oracle"),
    ("8b", "TTS overfit oracle"),
    ("8c", "FTS overfit oracle, random init"),
    ("9", "parameter reuse contract"),
    ("10", "format round trips"),
    ("11", "FTS value span"),
]
_RESULTS: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(key): acceptance criterion covered by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or not (rep.when == "call" or rep.failed):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed and not detail:
        detail = str(rep.longrepr).strip().splitlines()[-1][:160]
    _RESULTS[m.args[0]] = ("PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key, title in CRITERIA:
        status, detail = _RESULTS.get(key, ("NOT RUN", ""))
        terminalreporter.write_line(f"[{status:7s}] {key:>3s}  {title}" + (f": {detail}" if detail else ""))
