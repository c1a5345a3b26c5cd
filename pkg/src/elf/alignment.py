"""Monotonic alignment search between text positions and latent frames."""
from __future__ import annotations

import numpy as np
import torch


class InfeasibleAlignmentError(ValueError):
    pass


def monotonic_alignment_search(loglik) -> np.ndarray:
    """Most likely monotonic, contiguous, surjective alignment.

    ``loglik`` is (L, T) with T >= L. Returns an (L, T) 0/1 matrix in which
    every column has exactly one 1, every row a non-empty contiguous run,
    and runs advance by exactly one row. Ties in the backtrack prefer
    staying on the current text position.
    """
    v = np.asarray(loglik, dtype=np.float64)
    L, T = v.shape
    if L < 1 or T < L:
        raise InfeasibleAlignmentError(f"cannot align {L} text positions to {T} frames")
    if not np.all(np.isfinite(v)):
        raise ValueError("log-likelihoods must be finite")
    neg = -np.inf
    Q = np.full((L, T), neg)
    Q[0, 0] = v[0, 0]
    for j in range(1, T):
        stay = Q[:, j - 1]
        move = np.concatenate(([neg], Q[:-1, j - 1]))
        Q[:, j] = np.maximum(stay, move) + v[:, j]
        # row i is reachable at column j only if i <= j and the remaining
        # L-1-i rows still fit into T-1-j frames
        Q[j + 1 :, j] = neg
    Q[:, :] = np.where(_feasible(L, T), Q, neg)
    path = np.zeros((L, T), dtype=np.int8)
    i = L - 1
    for j in range(T - 1, -1, -1):
        path[i, j] = 1
        if j == 0:
            break
        if i > 0 and (i == j or Q[i - 1, j - 1] > Q[i, j - 1]):
            i -= 1
    return path


def _feasible(L: int, T: int) -> np.ndarray:
    i = np.arange(L)[:, None]
    j = np.arange(T)[None, :]
    return (i <= j) & (L - 1 - i <= T - 1 - j)


def alignment_score(loglik, path) -> float:
    return float(np.sum(np.asarray(loglik, dtype=np.float64) * path))


def durations(path) -> np.ndarray:
    return np.asarray(path).sum(axis=1).astype(np.int64)


def path_from_durations(dur, T: int | None = None) -> np.ndarray:
    dur = np.asarray(dur, dtype=np.int64)
    total = int(dur.sum())
    T = total if T is None else T
    path = np.zeros((len(dur), T), dtype=np.int8)
    ends = np.cumsum(dur)
    starts = ends - dur
    for i, (s, e) in enumerate(zip(starts, ends)):
        path[i, s:e] = 1
    return path


def batch_mas(loglik: torch.Tensor, text_lengths, frame_lengths) -> torch.Tensor:
    """loglik: (B, L, T) -> (B, L, T) float alignment, zero outside each item's extent."""
    ll = loglik.detach().cpu().double().numpy()
    out = np.zeros(ll.shape, dtype=np.float32)
    for b, (lt, lf) in enumerate(zip(text_lengths, frame_lengths)):
        lt, lf = int(lt), int(lf)
        out[b, :lt, :lf] = monotonic_alignment_search(ll[b, :lt, :lf])
    return torch.from_numpy(out).to(loglik.dtype)
