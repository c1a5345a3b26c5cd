import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from elf.checkpoint import ChecksumError
from elf.codebook import (
    CodebookError,
    MuFrameSet,
    SpeakerCodebook,
    build_codebook,
    d2_probabilities,
    decode_codebook,
    encode_codebook,
    extract_mu_frames,
    kmeans,
    kmeanspp_init,
    lloyd,
    load_codebook,
    save_codebook,
)
from elf.config import SfenConfig
from elf.sfen import SFEN, encode

from conftest import micro_decoder
from helpers import optimal_sse, optimal_sse_all_labelings, partitions


def four_blobs(rng, n_per=40, spread=0.5):
    centers = np.array([[0, 0], [10, 0], [0, 10], [10, 10]], dtype=float)
    return np.concatenate([c + spread * rng.standard_normal((n_per, 2)) for c in centers])


# --- frame extraction ------------------------------------------------------


@pytest.fixture(scope="module")
def sfen():
    torch.manual_seed(0)
    return SFEN(SfenConfig(n_mels=80, latent_dim=6, encoder_hidden=8, encoder_layers=2, decoder=micro_decoder()))


def mels(rng, lengths):
    return [(f"c{i}", rng.standard_normal((n, 80)).astype(np.float32)) for i, n in enumerate(lengths)]


def test_extract_concatenates(sfen):
    items = mels(np.random.default_rng(0), [10, 20, 30])
    fs = extract_mu_frames("s", items, sfen)
    assert fs.n_frames == 60 and fs.frames.shape[1] == 6
    assert fs.clip_ranges == {"c0": (0, 10), "c1": (10, 30), "c2": (30, 60)}


def test_extract_single_clip_is_encode(sfen):
    (cid, mel), = mels(np.random.default_rng(1), [12])
    fs = extract_mu_frames("s", [(cid, mel)], sfen)
    np.testing.assert_array_equal(fs.frames, encode(sfen, mel).mu.detach().numpy())


def test_extract_shuffled_same_multiset(sfen):
    items = mels(np.random.default_rng(2), [5, 7, 9])
    a = extract_mu_frames("s", items, sfen).frames
    b = extract_mu_frames("s", items[::-1], sfen).frames
    key = lambda m: m[np.lexsort(m.T[::-1])]  # noqa: E731
    np.testing.assert_array_equal(key(a), key(b))


def test_extract_empty_raises(sfen):
    with pytest.raises(CodebookError):
        extract_mu_frames("s", [], sfen)


# --- seeding ---------------------------------------------------------------


def test_d2_probability_example():
    pts = np.array([[0, 0], [0, 1], [100, 0]], dtype=float)
    p = d2_probabilities(pts, pts[:1])
    assert p[2] == pytest.approx(10000 / 10001)
    assert p[1] == pytest.approx(1 / 10001)


def test_d2_sampling_frequency():
    # Monte Carlo over the seeding itself with the first pick fixed at (0, 0)
    pts = np.array([[0, 0], [0, 1], [3, 0]], dtype=float)
    rng = np.random.default_rng(0)
    hits = 0
    trials = 0
    for _ in range(4000):
        c = kmeanspp_init(pts, 2, rng)
        if np.array_equal(c[0], pts[0]):
            trials += 1
            hits += np.array_equal(c[1], pts[2])
    assert abs(hits / trials - 9 / 10) < 0.03


def test_kmeanspp_k1_and_kn():
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((6, 3))
    c1 = kmeanspp_init(pts, 1, rng)
    assert any(np.array_equal(c1[0], p) for p in pts)
    cn = kmeanspp_init(pts, 6, rng)
    assert sorted(map(tuple, cn)) == sorted(map(tuple, pts))
    with pytest.raises(CodebookError):
        kmeanspp_init(pts, 7, rng)


def test_kmeanspp_first_pick_uniform():
    pts = np.arange(4, dtype=float)[:, None]
    rng = np.random.default_rng(3)
    counts = np.zeros(4)
    for _ in range(4000):
        counts[int(kmeanspp_init(pts, 1, rng)[0, 0])] += 1
    assert np.all(np.abs(counts / 4000 - 0.25) < 0.03)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 15), st.integers(1, 3)),
                  elements=st.floats(-100, 100), unique=True), st.integers(0, 1000))
def test_kmeanspp_picks_distinct_input_points(pts, seed):
    uniq = np.unique(pts, axis=0)
    K = min(3, len(uniq))
    c = kmeanspp_init(uniq, K, np.random.default_rng(seed))
    assert len(np.unique(c, axis=0)) == K
    assert all(any(np.array_equal(r, p) for p in uniq) for r in c)


# --- Lloyd -----------------------------------------------------------------


def test_lloyd_two_pairs():
    pts = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], dtype=float)
    res = lloyd(pts, pts[[0, 2]])
    assert sorted(map(tuple, res.centroids)) == [(0, 0.5), (10, 0.5)]
    assert res.sse == pytest.approx(1.0)
    assert optimal_sse(pts, 2) == pytest.approx(1.0)


def test_lloyd_k_equals_n():
    pts = np.random.default_rng(0).standard_normal((5, 2))
    res = lloyd(pts, pts.copy())
    assert res.sse == 0.0
    np.testing.assert_array_equal(res.centroids, pts)


def test_lloyd_identical_points():
    pts = np.tile([[1.5, -2.0]], (7, 1))
    res = lloyd(pts, pts[:1])
    np.testing.assert_array_equal(res.centroids[0], [1.5, -2.0])
    assert res.sse == 0.0


def test_lloyd_repairs_empty_cluster():
    pts = np.array([[0.0], [1.0], [2.0], [50.0]])
    # the second seed is far from everything and owns nothing after step one
    res = lloyd(pts, np.array([[1.0], [1000.0]]))
    assert len(np.unique(res.assignments)) == 2
    assert res.sse == pytest.approx(2.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(5, 40), st.integers(1, 5))
def test_lloyd_sse_never_increases(seed, n, k):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n, 2)) * rng.uniform(0.1, 5)
    res = lloyd(pts, kmeanspp_init(pts, min(k, n), rng))
    h = np.array(res.history)
    assert np.all(np.diff(h) <= 1e-9 * max(h[0], 1.0))


def test_partition_enumerator_counts():
    # Stirling numbers of the second kind
    assert sum(1 for _ in partitions(5, 2)) == 15
    assert sum(1 for _ in partitions(6, 3)) == 90


@pytest.mark.parametrize("n, k", [(1, 1), (4, 2), (6, 3), (7, 2), (8, 3)])
def test_labeling_scan_agrees_with_partition_enumeration(n, k):
    pts = np.random.default_rng(n * 10 + k).standard_normal((n, 2))
    assert optimal_sse_all_labelings(pts, k) == pytest.approx(optimal_sse(pts, k), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_build_reaches_global_optimum_small(seed):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((9, 2))
    cb = build_codebook(MuFrameSet("s", pts), 3, seed=seed, restarts=50)
    assign = ((pts[:, None] - cb.vectors[None].astype(np.float64)) ** 2).sum(-1).argmin(1)
    sse = sum(((pts[assign == j] - pts[assign == j].mean(0)) ** 2).sum() for j in range(3))
    assert sse == pytest.approx(optimal_sse(pts.astype(np.float32).astype(np.float64), 3), rel=1e-5)


def test_kmeanspp_beats_uniform_on_blobs():
    sse_pp, sse_uni = [], []
    for seed in range(20):
        pts = four_blobs(np.random.default_rng(seed))
        sse_pp.append(kmeans(pts, 4, np.random.default_rng(seed), init="k-means++").sse)
        sse_uni.append(kmeans(pts, 4, np.random.default_rng(seed), init="uniform").sse)
    assert np.mean(sse_pp) <= np.mean(sse_uni)


# --- build -----------------------------------------------------------------


def test_build_clustered_and_fallback():
    rng = np.random.default_rng(0)
    big = MuFrameSet("a", rng.standard_normal((600, 4)))
    cb = build_codebook(big, 32)
    assert cb.K == 32 and cb.clustered and cb.n_source_frames == 600
    small = MuFrameSet("b", rng.standard_normal((40, 4)))
    fb = build_codebook(small, 512)
    assert fb.K == 40 and not fb.clustered
    np.testing.assert_array_equal(fb.vectors, small.frames)


def test_build_k_equals_n_is_permutation():
    pts = np.random.default_rng(1).standard_normal((6, 3)).astype(np.float32)
    cb = build_codebook(MuFrameSet("s", pts), 6)
    assert cb.clustered
    assert sorted(map(tuple, cb.vectors)) == sorted(map(tuple, pts))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 30), st.integers(1, 4))
def test_centroids_inside_hull_box(seed, n, k):
    # each centroid is a subset mean, so it lies in the bounding box of the frames
    pts = np.random.default_rng(seed).standard_normal((n, 3)).astype(np.float32)
    cb = build_codebook(MuFrameSet("s", pts), k, seed=seed, restarts=1)
    assert np.all(np.isfinite(cb.vectors))
    assert np.all(cb.vectors >= pts.min(0) - 1e-5) and np.all(cb.vectors <= pts.max(0) + 1e-5)


def test_build_is_seeded():
    pts = np.random.default_rng(0).standard_normal((200, 4))
    assert build_codebook(MuFrameSet("s", pts), 8, seed=3) == build_codebook(MuFrameSet("s", pts), 8, seed=3)


# --- file format -----------------------------------------------------------


def sample_cb(K=5, H=3):
    return SpeakerCodebook("spk é", np.random.default_rng(0).standard_normal((K, H)), True, 321, 4, 99)


@pytest.mark.parametrize("version", [1, 2])
def test_roundtrip(tmp_path, version):
    cb = sample_cb()
    save_codebook(cb, tmp_path / "c.elfc", version)
    back = load_codebook(tmp_path / "c.elfc")
    if version == 1:
        cb.n_source_frames = cb.n_source_clips = None
    assert back == cb


def test_v1_layout_is_exact():
    cb = sample_cb(K=2, H=2)
    data = encode_codebook(cb, 1)
    sid = "spk é".encode()
    header = b"ELFC" + struct.pack("<I", 1) + struct.pack("<I", len(sid)) + sid + struct.pack("<IIBQ", 2, 2, 1, 99)
    assert data.startswith(header)
    assert len(data) == len(header) + 2 * 2 * 4 + 4


def test_payload_size_paper_scale():
    cb = SpeakerCodebook("s", np.zeros((512, 2048), np.float32), True, 10_000, 3, 0)
    data = encode_codebook(cb)
    assert decode_codebook(data).vectors.shape == (512, 2048)
    assert cb.vectors.astype("<f4").nbytes == 4_194_304


def test_truncation_and_corruption_detected(tmp_path):
    data = encode_codebook(sample_cb())
    with pytest.raises(ChecksumError):
        decode_codebook(data[:-1])
    bad = bytearray(data)
    bad[20] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode_codebook(bytes(bad))


def test_bad_magic_and_version():
    with pytest.raises(CodebookError):
        decode_codebook(b"XXXX" + bytes(20))
    with pytest.raises(CodebookError):
        encode_codebook(sample_cb(), 3)
