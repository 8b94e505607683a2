"""SROCC and PLCC between ground-truth and predicted scores."""
from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, InputError


def ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size < 1:
        raise InputError("ranks of an empty sequence")
    order = np.argsort(v, kind="mergesort")
    sorted_v = v[order]
    out = np.empty(v.size)
    start = 0
    while start < v.size:
        stop = start + 1
        while stop < v.size and sorted_v[stop] == sorted_v[start]:
            stop += 1
        out[order[start:stop]] = 0.5 * (start + 1 + stop)
        start = stop
    return out


def _pair(ground, pred) -> tuple[np.ndarray, np.ndarray]:
    g = np.asarray(ground, dtype=np.float64).reshape(-1)
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    if g.size != p.size:
        raise InputError(f"score lists differ in length: {g.size} vs {p.size}")
    if g.size < 2:
        raise InputError("correlation needs at least 2 pairs")
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(p))):
        raise InputError("scores must be finite")
    return g, p


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt((dx * dx).sum())
    sy = np.sqrt((dy * dy).sum())
    if sx == 0 or sy == 0:
        raise DegenerateInputError("correlation undefined for a constant score list")
    return float(np.clip((dx * dy).sum() / (sx * sy), -1.0, 1.0))


def plcc(ground, pred) -> float:
    g, p = _pair(ground, pred)
    return _pearson(g, p)


def srocc(ground, pred) -> float:
    """Spearman correlation on rank vectors.

    Without ties this is ``1 - 6 sum(d^2) / (n (n^2 - 1))``; with ties the
    Pearson correlation of the averaged ranks is used.
    """
    g, p = _pair(ground, pred)
    if np.all(g == g[0]) or np.all(p == p[0]):
        raise DegenerateInputError("SROCC undefined for a constant score list")
    rg, rp = ranks(g), ranks(p)
    n = g.size
    if np.unique(g).size == n and np.unique(p).size == n:
        d = rg - rp
        return float(1.0 - 6.0 * (d * d).sum() / (n * (n * n - 1)))
    return _pearson(rg, rp)
