"""Periodic value noise and stable seeding helpers."""

from __future__ import annotations

import hashlib

import numpy as np


def stable_seed(*parts) -> int:
    """64-bit seed from arbitrary parts; independent of PYTHONHASHSEED."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def stable_rng(*parts):
    return np.random.default_rng(stable_seed(*parts))


def fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def lattice(rng, cells_y, cells_x):
    return rng.random((cells_y, cells_x))


def eval_periodic(grid, x, y):
    """Evaluate value noise of an ``(ny, nx)`` lattice at lattice coordinates.

    The field repeats every ``nx`` along x and ``ny`` along y.
    """
    ny, nx = grid.shape
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = fade(x - x0)
    fy = fade(y - y0)
    xa = np.mod(x0.astype(np.int64), nx)
    ya = np.mod(y0.astype(np.int64), ny)
    xb = np.mod(xa + 1, nx)
    yb = np.mod(ya + 1, ny)
    top = grid[ya, xa] + fx * (grid[ya, xb] - grid[ya, xa])
    bot = grid[yb, xa] + fx * (grid[yb, xb] - grid[yb, xa])
    return top + fy * (bot - top)


def periodic_noise(rng, height, width, cells_y, cells_x):
    """``(height, width)`` tileable value noise with the given lattice size."""
    grid = lattice(rng, cells_y, cells_x)
    ys = np.arange(height) / height * cells_y
    xs = np.arange(width) / width * cells_x
    xx, yy = np.meshgrid(xs, ys)
    return eval_periodic(grid, xx, yy)


def color_from_text(text, lo=0.15, hi=0.85):
    """Deterministic RGB in ``[lo, hi]`` derived from a string."""
    d = hashlib.sha256(text.encode("utf-8")).digest()
    return lo + (hi - lo) * np.array([d[0], d[1], d[2]], float) / 255.0
