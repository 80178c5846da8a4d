"""Geometric adaptation of rendered metric depth to the estimated-depth domain.

A 32x16 thumbnail of the rendered depth is matched against a library of
reference thumbnails by cosine similarity; a cubic least-squares fit between
the query and the retrieved reference is then applied to the full map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateQuery, EmptyLibrary, RankDeficient
from .imageio import read_raw, write_raw
from .panorama import ErpImage, SKY_DEPTH

THUMB_W, THUMB_H = 32, 16
CLAMP_HEADROOM = 1.05


def _is_sky(a):
    return np.asarray(a) >= SKY_DEPTH * 0.5


@dataclass
class DepthThumb:
    id: str
    samples: np.ndarray
    source: str = ""
    _unit: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.shape != (THUMB_W * THUMB_H,):
            raise ValueError(f"thumb must hold {THUMB_W * THUMB_H} samples")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("thumb samples must be finite")

    @property
    def unit(self):
        """Mean-subtracted, L2-normalized feature (sky replaced by the farthest sample)."""
        if self._unit is None:
            s = self.samples.copy()
            sky = _is_sky(s)
            if sky.all():
                s[:] = 0.0
            elif sky.any():
                s[sky] = s[~sky].max()
            s -= s.mean()
            n = np.linalg.norm(s)
            self._unit = s / n if n > 1e-12 else np.zeros_like(s)
        return self._unit

    def as_image(self):
        return self.samples.reshape(THUMB_H, THUMB_W)


def thumbnail(depth, id="query", source=""):
    """Block-average a depth panorama to 32x16, ignoring sky pixels.

    Blocks consisting only of sky keep the sky sentinel.
    """
    d = depth.plane() if isinstance(depth, ErpImage) else np.asarray(depth, float)
    if d.ndim == 3:
        d = d[:, :, 0]
    h, w = d.shape
    re = (np.arange(THUMB_H) * h) // THUMB_H
    ce = (np.arange(THUMB_W) * w) // THUMB_W
    sky = _is_sky(d)
    val = np.where(sky, 0.0, d)
    cnt = (~sky).astype(np.float64)
    s = np.add.reduceat(np.add.reduceat(val, re, axis=0), ce, axis=1)
    c = np.add.reduceat(np.add.reduceat(cnt, re, axis=0), ce, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(c > 0, s / np.maximum(c, 1), SKY_DEPTH)
    return DepthThumb(id, out, source)


def cosine(a: DepthThumb, b: DepthThumb):
    return float(np.dot(a.unit, b.unit))


def retrieve_reference(query: DepthThumb, library):
    """Argmax of cosine similarity over the library; ties go to the smallest id."""
    if not library:
        raise EmptyLibrary("depth reference library is empty")
    if not np.any(query.unit):
        raise DegenerateQuery("query thumbnail has zero variance")
    return min(library, key=lambda r: (-cosine(query, r), r.id))


@dataclass
class RemapPolynomial:
    """Cubic ``ref ~ c3 x^3 + c2 x^2 + c1 x + c0`` with ``x = (d - lo) / (hi - lo)``."""

    c3: float
    c2: float
    c1: float
    c0: float
    src_range: tuple
    ref_max: float
    residual_rms: float = 0.0
    monotonic: bool = True

    @property
    def coefficients(self):
        return np.array([self.c3, self.c2, self.c1, self.c0])

    def normalize(self, d):
        lo, hi = self.src_range
        return (np.asarray(d, float) - lo) / (hi - lo)

    def __call__(self, d):
        return np.polyval(self.coefficients, self.normalize(d))

    def raw_coefficients(self):
        """Coefficients of the same cubic expressed in un-normalized depth ``d``."""
        lo, hi = self.src_range
        s = hi - lo
        # x = (d - lo) / s  ->  compose the cubic with a linear map
        lin = np.poly1d([1.0 / s, -lo / s])
        return np.poly1d(self.coefficients)(lin).coeffs.copy()

    def to_dict(self):
        return {"c3": self.c3, "c2": self.c2, "c1": self.c1, "c0": self.c0,
                "src_range": list(self.src_range), "ref_max": self.ref_max,
                "residual_rms": self.residual_rms, "monotonic": self.monotonic}


def design_matrix(x):
    x = np.asarray(x, float)
    return np.stack([x ** 3, x ** 2, x, np.ones_like(x)], axis=1)


def fit_remap(src: DepthThumb, ref: DepthThumb) -> RemapPolynomial:
    """Least-squares cubic from query samples to reference samples.

    Sample pairs where either side is sky are dropped; the query range is
    normalized to ``[0, 1]`` before fitting for conditioning.
    """
    s, r = src.samples, ref.samples
    keep = ~_is_sky(s) & ~_is_sky(r)
    s, r = s[keep], r[keep]
    if len(np.unique(s)) < 4:
        raise RankDeficient("need at least 4 distinct source depths for a cubic fit")
    lo, hi = float(s.min()), float(s.max())
    x = (s - lo) / (hi - lo)
    a = design_matrix(x)
    coef, *_ = np.linalg.lstsq(a, r, rcond=None)
    resid = float(np.sqrt(np.mean((a @ coef - r) ** 2)))
    grid = np.linspace(0.0, 1.0, 257)
    deriv = np.polyval(np.polyder(coef), grid)
    # rounding noise around a stationary point must not flip the diagnostic
    tol = 1e-9 * max(1.0, float(np.abs(coef).max()))
    mono = bool(np.all(deriv >= -tol) or np.all(deriv <= tol))
    return RemapPolynomial(*map(float, coef), src_range=(lo, hi), ref_max=float(r.max()),
                           residual_rms=resid, monotonic=mono)


def apply_remap(poly: RemapPolynomial, depth) -> ErpImage:
    """Remap non-sky pixels, clamp to ``[0, 1.05 * max(ref)]``, keep the sky sentinel."""
    d = depth.data if isinstance(depth, ErpImage) else np.asarray(depth, float)
    if d.ndim == 3 and d.shape[2] != 1:
        raise ValueError("apply_remap expects a single-channel depth map")
    sky = _is_sky(d)
    out = np.clip(poly(np.where(sky, poly.src_range[0], d)), 0.0, CLAMP_HEADROOM * poly.ref_max)
    out = np.where(np.isfinite(out), out, 0.0)
    return ErpImage(np.where(sky, d, out))


def adapt_depth(depth, library):
    """Convenience: thumbnail, retrieve, fit and apply; returns ``(remapped, poly, ref)``."""
    q = thumbnail(depth)
    ref = retrieve_reference(q, library)
    poly = fit_remap(q, ref)
    return apply_remap(poly, depth), poly, ref


# ---------------------------------------------------------------------------
# on-disk library: <dir>/index.json + one raw float32 thumb per entry
# ---------------------------------------------------------------------------

def save_library(directory, thumbs):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for t in thumbs:
        fname = f"{t.id}.f32"
        write_raw(directory / fname, t.as_image())
        entries.append({"id": t.id, "file": fname, "source": t.source})
    (directory / "index.json").write_text(json.dumps({"thumbs": entries}, indent=2, sort_keys=True))


def load_library(directory):
    directory = Path(directory)
    doc = json.loads((directory / "index.json").read_text())
    return [DepthThumb(e["id"], read_raw(directory / e["file"]).reshape(-1), e.get("source", ""))
            for e in doc["thumbs"]]


def estimated_style(depth, a=8.0, b=2.0, c=None, noise=0.0, rng=None):
    """Synthetic estimated-style depth: saturating ``c - a / (d + b) + noise``.

    ``c`` defaults to ``a / b`` so that zero depth maps to zero; sky maps to
    ``c`` (the far asymptote). Used to build reference fixtures.
    """
    d = np.asarray(depth, float)
    c = a / b if c is None else c
    sky = _is_sky(d)
    out = c - a / (np.where(sky, np.inf, d) + b)
    if noise:
        rng = rng or np.random.default_rng(0)
        out = out + noise * rng.standard_normal(out.shape)
    return out
