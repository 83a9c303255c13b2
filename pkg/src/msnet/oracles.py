"""Slow reference implementations used to cross-check the fast metric code.

Everything here is written with plain Python loops over pixels on purpose:
it shares no code with :mod:`msnet.evaluation`.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np


def brute_dice(a, b) -> float:
    inter = size_a = size_b = 0
    for va, vb in zip(np.asarray(a).ravel().tolist(), np.asarray(b).ravel().tolist()):
        size_a += bool(va)
        size_b += bool(vb)
        inter += bool(va) and bool(vb)
    if size_a + size_b == 0:
        return 1.0
    return 2.0 * inter / (size_a + size_b)


def brute_boundary(mask) -> list[tuple[int, int]]:
    m = np.asarray(mask).astype(bool)
    h, w = m.shape
    out = []
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                y, x = i + di, j + dj
                if not (0 <= y < h and 0 <= x < w) or not m[y, x]:
                    out.append((i, j))
                    break
    return out


def brute_asd(a, b) -> float:
    """All-pairs boundary distances; the sum is exact via fsum."""
    ba, bb = brute_boundary(a), brute_boundary(b)
    if not ba or not bb:
        raise ValueError("empty mask")

    def nearest(p, pts):
        return min(math.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2) for q in pts)

    total = math.fsum(nearest(p, bb) for p in ba) + math.fsum(nearest(p, ba) for p in bb)
    return total / (len(ba) + len(bb))


def bfs_components(mask) -> list[list[tuple[int, int]]]:
    """8-connected components in order of their first pixel (row-major scan)."""
    m = np.asarray(mask).astype(bool)
    h, w = m.shape
    seen = np.zeros_like(m)
    comps = []
    for i in range(h):
        for j in range(w):
            if not m[i, j] or seen[i, j]:
                continue
            comp, queue = [], deque([(i, j)])
            seen[i, j] = True
            while queue:
                y, x = queue.popleft()
                comp.append((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and m[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            queue.append((ny, nx))
            comps.append(comp)
    return comps


def brute_largest_component(mask) -> np.ndarray:
    m = np.asarray(mask)
    out = np.zeros(m.shape, dtype=np.uint8)
    best = None
    for comp in bfs_components(m):
        if best is None or len(comp) > len(best):
            best = comp
    for y, x in best or ():
        out[y, x] = 1
    return out


def random_mask(rng: np.random.Generator, size: int = 16) -> np.ndarray:
    """Blobby random mask: thresholded sum of a few random boxes plus salt noise."""
    m = np.zeros((size, size), dtype=np.uint8)
    for _ in range(rng.integers(0, 4)):
        y0, x0 = rng.integers(0, size, 2)
        y1, x1 = y0 + rng.integers(1, size // 2 + 1), x0 + rng.integers(1, size // 2 + 1)
        m[y0:y1, x0:x1] = 1
    m |= (rng.random((size, size)) < rng.uniform(0.0, 0.15)).astype(np.uint8)
    return m
