"""Per-speaker latent feature codebooks.

All of a speaker's encoder means are pooled and clustered with k-means++
seeding followed by Lloyd iterations (squared Euclidean distance, no
whitening). When a speaker has fewer frames than the requested cluster
count the raw frames are used directly.

Codebook file layout (little-endian)::

    b"ELFC" | version u32 | speaker_id: u32 length + UTF-8 | K u32 | H u32
    | clustered u8 | seed u64 | [version 2 only: n_source_frames u64, n_source_clips u32]
    | K*H float32 row-major | CRC-32 of all preceding bytes (u32)

Version 1 is the minimal layout; version 2 (the default written here) adds
the two provenance counts after the seed.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import ChecksumError

MAGIC = b"ELFC"
FORMAT_VERSION = 2


class CodebookError(ValueError):
    pass


@dataclass
class MuFrameSet:
    speaker_id: str
    frames: np.ndarray  # (N, H)
    clip_ranges: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise CodebookError("need at least one (H,) frame")
        if not np.all(np.isfinite(self.frames)):
            raise CodebookError("non-finite mu frames")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class SpeakerCodebook:
    speaker_id: str
    vectors: np.ndarray  # (K, H) float32
    clustered: bool
    n_source_frames: int | None = None
    n_source_clips: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise CodebookError("codebook must be a non-empty (K, H) matrix")
        if not np.all(np.isfinite(self.vectors)):
            raise CodebookError("non-finite codebook rows")

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def H(self) -> int:
        return self.vectors.shape[1]

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.vectors).to(dtype)

    def __eq__(self, other):
        if not isinstance(other, SpeakerCodebook):
            return NotImplemented
        return (
            self.speaker_id == other.speaker_id
            and self.clustered == other.clustered
            and self.n_source_frames == other.n_source_frames
            and self.n_source_clips == other.n_source_clips
            and self.seed == other.seed
            and self.vectors.shape == other.vectors.shape
            and np.array_equal(self.vectors.view(np.uint32), other.vectors.view(np.uint32))
        )


# ---------------------------------------------------------------------------
# Frame extraction


def extract_mu_frames(speaker_id: str, mels, model) -> MuFrameSet:
    """Concatenate encoder means over ``mels`` (an ordered mapping or list of
    ``(clip_id, (T, n_mels) array)``) in the given order."""
    from .sfen import encode

    items = list(mels.items()) if isinstance(mels, dict) else list(mels)
    if not items:
        raise CodebookError(f"speaker {speaker_id!r} has no clips")
    chunks, ranges, pos = [], {}, 0
    with torch.no_grad():
        for clip_id, mel in items:
            mu = encode(model, mel).mu.float().numpy()
            chunks.append(mu)
            ranges[clip_id] = (pos, pos + len(mu))
            pos += len(mu)
    return MuFrameSet(speaker_id, np.concatenate(chunks), ranges)


# ---------------------------------------------------------------------------
# Clustering


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(N, K) squared Euclidean distances."""
    p2 = np.einsum("ij,ij->i", points, points)[:, None]
    c2 = np.einsum("ij,ij->i", centroids, centroids)[None, :]
    return np.maximum(p2 + c2 - 2.0 * points @ centroids.T, 0.0)


def d2_probabilities(points: np.ndarray, chosen: np.ndarray) -> np.ndarray:
    """k-means++ sampling distribution given already-chosen centroids."""
    d = _sq_dists(np.asarray(points, np.float64), np.asarray(chosen, np.float64)).min(axis=1)
    total = d.sum()
    if total == 0:
        return np.full(len(points), 1.0 / len(points))
    return d / total


def kmeanspp_init(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    N = len(points)
    if not 1 <= K <= N:
        raise CodebookError(f"need 1 <= K <= N, got K={K}, N={N}")
    idx = [int(rng.integers(N))]
    closest = _sq_dists(points, points[idx]).ravel()
    for _ in range(1, K):
        total = closest.sum()
        if total > 0:
            probs = closest / total
        else:
            # all remaining points coincide with a chosen centroid
            probs = np.ones(N)
            probs[idx] = 0.0
            probs /= probs.sum()
        nxt = int(rng.choice(N, p=probs))
        idx.append(nxt)
        closest = np.minimum(closest, _sq_dists(points, points[nxt : nxt + 1]).ravel())
    return points[idx].copy()


def uniform_init(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if not 1 <= K <= len(points):
        raise CodebookError(f"need 1 <= K <= N, got K={K}, N={len(points)}")
    return points[rng.choice(len(points), size=K, replace=False)].copy()


@dataclass
class LloydResult:
    centroids: np.ndarray
    assignments: np.ndarray
    sse: float
    history: list[float]
    iterations: int


def lloyd(points: np.ndarray, init: np.ndarray, max_iters: int = 300, tol: float = 1e-6) -> LloydResult:
    """Alternate nearest-centroid assignment and mean update.

    Stops at an assignment fixpoint, when the relative SSE improvement drops
    below ``tol``, or after ``max_iters``. A cluster that loses all its points
    is re-seeded with the point currently farthest from its own centroid.
    ``history`` holds the SSE after every completed iteration.
    """
    X = np.asarray(points, dtype=np.float64)
    C = np.array(init, dtype=np.float64)
    K = len(C)
    assign = None
    history: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(X, C)
        new_assign = d.argmin(axis=1)
        point_d = d[np.arange(len(X)), new_assign]
        counts = np.bincount(new_assign, minlength=K)
        while np.any(counts == 0):
            k = int(np.flatnonzero(counts == 0)[0])
            movable = counts[new_assign] > 1
            far = int(np.where(movable, point_d, -1.0).argmax())
            new_assign[far] = k
            point_d[far] = 0.0
            counts = np.bincount(new_assign, minlength=K)
        for k in range(K):
            C[k] = X[new_assign == k].mean(axis=0)
        sse = float(((X - C[new_assign]) ** 2).sum())
        history.append(sse)
        converged = assign is not None and np.array_equal(new_assign, assign)
        assign = new_assign
        if converged:
            break
        if len(history) > 1 and history[-2] - sse <= tol * max(history[-2], 1e-300):
            break
    return LloydResult(C, assign, history[-1], history, it)


def kmeans(points: np.ndarray, K: int, rng: np.random.Generator, restarts: int = 1,
           max_iters: int = 300, tol: float = 1e-6, init: str = "k-means++") -> LloydResult:
    seeder = kmeanspp_init if init == "k-means++" else uniform_init
    best = None
    for _ in range(max(1, restarts)):
        res = lloyd(points, seeder(points, K, rng), max_iters, tol)
        if best is None or res.sse < best.sse:
            best = res
    return best


def build_codebook(frames: MuFrameSet, K: int, seed: int = 0, restarts: int = 4,
                   max_iters: int = 300, tol: float = 1e-6) -> SpeakerCodebook:
    n_clips = len(frames.clip_ranges) or None
    if frames.n_frames < K:
        return SpeakerCodebook(frames.speaker_id, frames.frames.copy(), clustered=False,
                               n_source_frames=frames.n_frames, n_source_clips=n_clips, seed=seed)
    rng = np.random.default_rng(seed)
    res = kmeans(frames.frames, K, rng, restarts=restarts, max_iters=max_iters, tol=tol)
    return SpeakerCodebook(frames.speaker_id, res.centroids.astype(np.float32), clustered=True,
                           n_source_frames=frames.n_frames, n_source_clips=n_clips, seed=seed)


# ---------------------------------------------------------------------------
# ELFC file format


def encode_codebook(cb: SpeakerCodebook, version: int = FORMAT_VERSION) -> bytes:
    if version not in (1, 2):
        raise CodebookError(f"unsupported codebook version {version}")
    sid = cb.speaker_id.encode("utf-8")
    parts = [MAGIC, struct.pack("<I", version), struct.pack("<I", len(sid)), sid,
             struct.pack("<IIBQ", cb.K, cb.H, int(cb.clustered), cb.seed)]
    if version == 2:
        parts.append(struct.pack("<QI", cb.n_source_frames or 0, cb.n_source_clips or 0))
    parts.append(cb.vectors.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_codebook(data: bytes) -> SpeakerCodebook:
    if len(data) < 8 or data[:4] != MAGIC:
        raise CodebookError("not an ELFC codebook file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("codebook CRC mismatch (file corrupt or truncated)")
    (version,) = struct.unpack_from("<I", body, 4)
    if version not in (1, 2):
        raise CodebookError(f"unsupported codebook version {version}")
    pos = 8
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    speaker_id = body[pos : pos + n].decode("utf-8")
    pos += n
    K, H, clustered, seed = struct.unpack_from("<IIBQ", body, pos)
    pos += struct.calcsize("<IIBQ")
    n_frames = n_clips = None
    if version == 2:
        n_frames, n_clips = struct.unpack_from("<QI", body, pos)
        pos += struct.calcsize("<QI")
        n_frames, n_clips = n_frames or None, n_clips or None
    payload = body[pos:]
    if len(payload) != 4 * K * H:
        raise CodebookError(f"payload is {len(payload)} bytes, expected {4 * K * H}")
    vectors = np.frombuffer(payload, dtype="<f4").reshape(K, H).astype(np.float32)
    return SpeakerCodebook(speaker_id, vectors, bool(clustered), n_frames, n_clips, seed)


def save_codebook(cb: SpeakerCodebook, path, version: int = FORMAT_VERSION) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_codebook(cb, version))


def load_codebook(path) -> SpeakerCodebook:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    return decode_codebook(path.read_bytes())
