"""Generative backends and the raster operations around them.

Every neural stage (panorama texturing, upscaling, sky outpainting, matting,
asset alpha/texture/refine, repainting) is a :class:`GenRequest` handled by a
backend. :class:`StubBackend` is a set of closed-form generators so that the
whole pipeline runs offline and deterministically; :class:`RemoteBackend`
speaks the JSON-over-HTTP protocol to a real model server.

Contracts that must hold for *any* backend (masked-region fidelity, matte
boundary values, alpha support) are enforced here, not in the backends.
"""

from __future__ import annotations

import hashlib
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import BackendMalformedReply, BackendUnavailable, DimMismatch, MissingAlpha
from .imageio import b64_png, png_b64
from .noise import color_from_text, periodic_noise, stable_rng
from .panorama import ErpImage, SKY_DEPTH, TileSet, Tile, tile_merge, tile_split

log = logging.getLogger(__name__)

KINDS = ("panorama", "outpaint", "matte", "asset_alpha", "asset_texture",
         "asset_refine", "repaint_tile", "upscale")
# output channel count per kind
CHANNELS = {"panorama": 3, "outpaint": 3, "matte": 1, "asset_alpha": 1,
            "asset_texture": 4, "asset_refine": 4, "repaint_tile": 3, "upscale": 3}
REQUIRED = {
    "panorama": ("depth",),
    "outpaint": ("image", "mask"),
    "matte": ("image", "mask"),
    "asset_texture": ("image", "mask"),
    "asset_refine": ("image",),
    "repaint_tile": ("image", "mask"),
    "upscale": ("image",),
}
ENV_URL = "PROXYWORLD_BACKEND_URL"
DEFAULT_REFINE_MARGIN = 4


def _hwc(a):
    a = np.asarray(a, dtype=np.float64)
    return a[:, :, None] if a.ndim == 2 else a


@dataclass
class GenRequest:
    kind: str
    prompt: str = ""
    seed: int = 0
    width: int = 0
    height: int = 0
    depth: np.ndarray | None = None
    image: np.ndarray | None = None
    mask: np.ndarray | None = None
    regions: list = field(default_factory=list)  # [(mask, text), ...]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown request kind {self.kind!r}")
        missing = [c for c in REQUIRED.get(self.kind, ()) if getattr(self, c) is None]
        if missing:
            raise ValueError(f"{self.kind} request is missing {', '.join(missing)}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("request width/height must be positive")

    def fingerprint(self):
        parts = [self.kind, self.prompt, self.seed, self.width, self.height]
        for a in (self.depth, self.image, self.mask):
            parts.append("-" if a is None else _digest(a))
        for m, text in self.regions:
            parts += [text, _digest(m)]
        return parts


def _digest(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    return hashlib.sha256(str(a.shape).encode() + a.tobytes()).hexdigest()


@dataclass
class RgbaTexture:
    """Straight (un-premultiplied) RGBA raster."""

    data: np.ndarray

    def __post_init__(self):
        self.data = _hwc(self.data)
        if self.data.shape[2] != 4:
            raise ValueError("RGBA texture needs 4 channels")

    @property
    def rgb(self):
        return self.data[:, :, :3]

    @property
    def alpha(self):
        return self.data[:, :, 3]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]


@dataclass
class Trimap:
    data: np.ndarray

    FG = 1.0
    UNKNOWN = 0.5
    BG = 0.0

    @property
    def fg(self):
        return self.data == self.FG

    @property
    def bg(self):
        return self.data == self.BG

    @property
    def unknown(self):
        return self.data == self.UNKNOWN


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------

class Backend:
    """Base class; subclasses implement :meth:`_generate`."""

    def __init__(self):
        self.call_log = []

    def generate(self, req: GenRequest) -> np.ndarray:
        self.call_log.append(req.kind)
        out = _hwc(self._generate(req))
        want = (req.height, req.width, CHANNELS[req.kind])
        if out.shape != want:
            raise BackendMalformedReply(f"{req.kind}: expected {want}, got {out.shape}")
        if not np.all(np.isfinite(out)):
            raise BackendMalformedReply(f"{req.kind}: non-finite samples")
        return np.clip(out, 0.0, 1.0)

    def _generate(self, req):
        raise NotImplementedError


class StubBackend(Backend):
    """Deterministic closed-form stand-ins for every generative stage."""

    def _generate(self, req):
        return getattr(self, "_" + req.kind)(req, stable_rng(*req.fingerprint()))

    # panorama: depth-banded palette modulated by tileable noise
    def _panorama(self, req, rng):
        h, w = req.height, req.width
        d = _resize_nearest(_hwc(req.depth)[:, :, 0], h, w)
        sky = d >= SKY_DEPTH * 0.5
        far = d[~sky].max() if (~sky).any() else 1.0
        x = np.where(sky, 1.0, d / max(far, 1e-9))
        band = np.clip((x * 4).astype(int), 0, 3)
        base = color_from_text(req.prompt or "ground", 0.2, 0.6)
        palette = np.stack([base * f for f in (0.8, 1.0, 1.15, 1.3)])
        n = periodic_noise(rng, h, w, 8, 16)[:, :, None]
        img = palette[band] * (0.75 + 0.5 * n)
        v = 1.0 - (np.arange(h) + 0.5) / h
        img[sky] = sky_gradient(v, w)[sky]
        for m, text in req.regions:
            m = _resize_nearest(_hwc(m)[:, :, 0], h, w)[:, :, None]
            img = img + 0.5 * m * (color_from_text(text) - img)
        return img

    def _upscale(self, req, rng):
        img = _hwc(req.image)
        zy = req.height / img.shape[0]
        zx = req.width / img.shape[1]
        out = ndimage.zoom(img, (zy, zx, 1), order=3, mode="grid-wrap", grid_mode=True)
        return out[:req.height, :req.width]

    def _outpaint(self, req, rng):
        v = 1.0 - (np.arange(req.height) + 0.5) / req.height
        return sky_gradient(v, req.width)

    def _matte(self, req, rng):
        tri = _hwc(req.mask)[:, :, 0]
        fg = tri == 1.0
        bg = tri == 0.0
        alpha = fg.astype(float)
        unk = ~(fg | bg)
        if unk.any():
            if not fg.any():
                alpha[unk] = 0.0
            elif not bg.any():
                alpha[unk] = 1.0
            else:
                d_fg = ndimage.distance_transform_edt(~fg)
                d_bg = ndimage.distance_transform_edt(~bg)
                alpha[unk] = (d_bg / (d_bg + d_fg))[unk]
        return alpha

    def _asset_alpha(self, req, rng):
        h, w = req.height, req.width
        yy, xx = np.mgrid[0:h, 0:w]
        x = (xx + 0.5) / w - 0.5
        y = (yy + 0.5) / h
        wobble = 0.08 * (periodic_noise(rng, h, w, 6, 6) - 0.5)
        treeish = any(k in req.prompt.lower() for k in ("tree", "pine", "oak", "palm", "birch"))
        if treeish:
            crown = (np.abs(x) < (0.42 * (y - 0.05) / 0.75 + wobble)) & (y > 0.05) & (y < 0.82)
            trunk = (np.abs(x) < 0.05) & (y >= 0.6) & (y < 0.98)
            shape = crown | trunk
        else:
            r = np.sqrt((x / 0.42) ** 2 + ((y - 0.6) / 0.38) ** 2)
            shape = r < 1.0 + wobble * 3
        return ndimage.gaussian_filter(shape.astype(float), 0.7)

    def _asset_texture(self, req, rng):
        canvas = _hwc(req.image)[:, :, :3]
        m = _hwc(req.mask)[:, :, :1]
        h, w = req.height, req.width
        tone = color_from_text(req.prompt, 0.2, 0.7)
        n = periodic_noise(rng, h, w, 16, 16)[:, :, None]
        context = canvas.reshape(-1, 3).mean(axis=0)
        asset = (0.8 * tone + 0.2 * context) * (0.7 + 0.6 * n)
        rgb = canvas + m * (asset - canvas)
        rough = ndimage.binary_dilation(m[:, :, 0] >= 0.5, iterations=1).astype(float)
        return np.concatenate([rgb, rough[:, :, None]], axis=2)

    def _asset_refine(self, req, rng):
        img = _hwc(req.image)
        alpha = ndimage.gaussian_filter(img[:, :, 3], 1.0)
        return np.concatenate([img[:, :, :3], alpha[:, :, None]], axis=2)

    def _repaint_tile(self, req, rng):
        img = _hwc(req.image)[:, :, :3]
        n = periodic_noise(rng, req.height, req.width, 32, 32)[:, :, None]
        return img * (0.9 + 0.2 * n)


class RemoteBackend(Backend):
    """JSON-over-HTTP client for ``POST <url>/generate``."""

    def __init__(self, url=None, timeout=300.0, retries=1, session=None):
        super().__init__()
        self.url = (url or os.environ.get(ENV_URL, "")).rstrip("/")
        if not self.url:
            raise BackendUnavailable(f"no backend URL given and {ENV_URL} is unset")
        self.timeout = timeout
        self.retries = retries
        self._session = session

    def _post(self, payload):
        import requests

        session = self._session or requests
        last = None
        for attempt in range(self.retries + 1):
            try:
                r = session.post(self.url + "/generate", json=payload, timeout=self.timeout)
                if r.status_code >= 500:
                    last = BackendUnavailable(f"backend returned HTTP {r.status_code}")
                    continue
                if r.status_code != 200:
                    raise BackendMalformedReply(f"backend returned HTTP {r.status_code}")
                return r.json()
            except requests.RequestException as exc:
                last = BackendUnavailable(str(exc))
                if attempt < self.retries:
                    time.sleep(0.5)
            except ValueError as exc:
                raise BackendMalformedReply(f"reply is not JSON: {exc}") from exc
        raise last

    def _generate(self, req):
        return reply_to_array(self._post(request_to_json(req)))


def depth_to_wire(depth):
    """Depth condition as 16-bit gray: ``d / max(non-sky)``, sky encoded as 1."""
    d = _hwc(depth)[:, :, 0]
    sky = d >= SKY_DEPTH * 0.5
    far = d[~sky].max() if (~sky).any() else 1.0
    return np.where(sky, 1.0, d / max(far, 1e-9))


def request_to_json(req: GenRequest) -> dict:
    cond = {}
    if req.depth is not None:
        cond["depth"] = png_b64(depth_to_wire(req.depth), bits=16)
    if req.image is not None:
        cond["image"] = png_b64(req.image)
    if req.mask is not None:
        cond["mask"] = png_b64(_hwc(req.mask)[:, :, 0])
    if req.regions:
        cond["regions"] = [{"mask": png_b64(_hwc(m)[:, :, 0]), "prompt": t} for m, t in req.regions]
    return {"kind": req.kind, "prompt": req.prompt, "seed": int(req.seed),
            "width": int(req.width), "height": int(req.height), "conditions": cond}


def reply_to_array(doc) -> np.ndarray:
    try:
        img = b64_png(doc["image"])
        w, h, c = int(doc["width"]), int(doc["height"]), int(doc["channels"])
    except (KeyError, TypeError, ValueError) as exc:
        raise BackendMalformedReply(f"malformed reply: {exc}") from exc
    if img.shape != (h, w, c):
        raise BackendMalformedReply(f"reply header says {(h, w, c)}, image is {img.shape}")
    return img


def make_backend(mode="stub", url=None, timeout=300.0):
    if mode == "stub":
        return StubBackend()
    if mode == "remote":
        return RemoteBackend(url, timeout=timeout)
    raise ValueError(f"unknown backend mode {mode!r}")


# ---------------------------------------------------------------------------
# raster helpers
# ---------------------------------------------------------------------------

def sky_gradient(v, width, horizon=(0.78, 0.85, 0.92), zenith=(0.22, 0.42, 0.78)):
    """``(len(v), width, 3)`` sky colors depending only on elevation ``v``."""
    t = np.clip((np.asarray(v, float) - 0.5) * 2.0, 0.0, 1.0)[:, None]
    col = np.asarray(horizon) + t * (np.asarray(zenith) - np.asarray(horizon))
    return np.broadcast_to(col[:, None, :], (len(v), width, 3)).copy()


def _resize_nearest(a, h, w):
    a = np.asarray(a)
    if a.shape[:2] == (h, w):
        return a
    ri = (np.arange(h) * a.shape[0]) // h
    ci = (np.arange(w) * a.shape[1]) // w
    return a[ri][:, ci]


def composite_over(fg, bg, mask):
    """``mask * fg.rgb + (1 - mask) * bg``."""
    f = fg.rgb if isinstance(fg, RgbaTexture) else _hwc(fg)[:, :, :3]
    b = _hwc(bg)[:, :, :3]
    m = _hwc(mask)[:, :, :1]
    if f.shape != b.shape or m.shape[:2] != b.shape[:2]:
        raise DimMismatch(f"composite_over: fg {f.shape}, bg {b.shape}, mask {m.shape}")
    return b + m * (f - b)


def _morph(mask, radius, op, wrap):
    if radius <= 0:
        return mask.copy()
    size = 2 * int(radius) + 1
    # rows clamp (poles); columns wrap across the panorama seam
    mode = ("nearest", "wrap") if wrap else "nearest"
    f = ndimage.maximum_filter if op == "dilate" else ndimage.minimum_filter
    return f(mask.astype(np.uint8), size=size, mode=mode).astype(bool)


def dilate(mask, radius, wrap=True):
    """Square (Chebyshev) dilation of a boolean mask."""
    return _morph(np.asarray(mask, bool), radius, "dilate", wrap)


def erode(mask, radius, wrap=True):
    return _morph(np.asarray(mask, bool), radius, "erode", wrap)


def build_trimap(mask, dilate_px, erode_px) -> Trimap:
    m = mask.plane() if isinstance(mask, ErpImage) else _hwc(mask)[:, :, 0]
    m = m >= 0.5
    fg = erode(m, erode_px)
    bg = ~dilate(m, dilate_px)
    data = np.full(m.shape, Trimap.UNKNOWN)
    data[fg] = Trimap.FG
    data[bg] = Trimap.BG
    return Trimap(data)


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------

def generate_base_panorama(backend, depth, global_prompt, region_prompts=(), seed=0,
                           upscale=True) -> ErpImage:
    """Depth-conditioned panorama, optionally followed by the x2 upscaling stage."""
    d = depth.data if isinstance(depth, ErpImage) else _hwc(depth)
    h, w = d.shape[:2]
    req = GenRequest("panorama", global_prompt, seed, w, h, depth=d, regions=list(region_prompts))
    img = backend.generate(req)
    if upscale:
        img = backend.generate(GenRequest("upscale", global_prompt, seed, 2 * w, 2 * h, image=img))
    return ErpImage(img)


def outpaint_sky(backend, pano, terrain_mask, prompt="clear sky", seed=0) -> ErpImage:
    """Replace terrain pixels (mask = 1) with synthesized sky; others kept bit-exact."""
    p = pano.data if isinstance(pano, ErpImage) else _hwc(pano)
    m = terrain_mask.plane() if isinstance(terrain_mask, ErpImage) else _hwc(terrain_mask)[:, :, 0]
    if m.shape != p.shape[:2]:
        raise DimMismatch("mask and panorama differ in size")
    m = m >= 0.5
    filled = backend.generate(GenRequest("outpaint", prompt, seed, p.shape[1], p.shape[0],
                                         image=p, mask=m.astype(float)))
    return ErpImage(np.where(m[:, :, None], filled, p))


def repaint(backend, image, mask, prompt, seed=0):
    img = _hwc(image)
    m = _hwc(mask)[:, :, 0] >= 0.5
    out = backend.generate(GenRequest("repaint_tile", prompt, seed, img.shape[1], img.shape[0],
                                      image=img, mask=m.astype(float)))
    return np.where(m[:, :, None], out, img[:, :, :3])


def matte_terrain(backend, pano, trimap, tile_size, overlap, seed=0, workers=1) -> ErpImage:
    """Tile-wise matting with circular padding, merged by partition-of-unity blending."""
    p = pano.data if isinstance(pano, ErpImage) else _hwc(pano)
    tri = trimap.data if isinstance(trimap, Trimap) else np.asarray(trimap, float)
    if tri.shape != p.shape[:2]:
        raise DimMismatch("trimap and panorama differ in size")
    img_tiles = tile_split(p, tile_size, overlap)
    tri_tiles = tile_split(tri, tile_size, overlap)

    def run(k):
        t_img = img_tiles.tiles[k].data
        t_tri = tri_tiles.tiles[k].data[:, :, 0]
        if not (t_tri == Trimap.UNKNOWN).any():
            return (t_tri == Trimap.FG).astype(float)[:, :, None]
        req = GenRequest("matte", "", seed + k, t_img.shape[1], t_img.shape[0],
                         image=t_img, mask=t_tri)
        return backend.generate(req)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outs = list(pool.map(run, range(len(img_tiles.tiles))))
    else:
        outs = [run(k) for k in range(len(img_tiles.tiles))]
    merged = tile_merge(TileSet(tile_size, overlap, p.shape[1],
                                [Tile(t.x_origin, o) for t, o in zip(img_tiles.tiles, outs)]))
    alpha = merged[:, :, 0]
    alpha[tri == Trimap.FG] = 1.0
    alpha[tri == Trimap.BG] = 0.0
    return ErpImage(np.clip(alpha, 0.0, 1.0))


def synthesize_asset_rgba(backend, prompt, background_ref, template_alpha=None, seed=0,
                          refine_margin=DEFAULT_REFINE_MARGIN, trace=None) -> RgbaTexture:
    """Context-aware RGBA synthesis: alpha sketch, context canvas, texture, alpha refine.

    ``trace`` (a list) receives the stage names in execution order.
    """
    trace = trace if trace is not None else []
    bg = _hwc(background_ref)[:, :, :3]
    h, w = bg.shape[:2]
    if template_alpha is not None:
        sketch = _hwc(template_alpha)[:, :, 0]
        if sketch.shape != (h, w):
            raise DimMismatch("template alpha and background differ in size")
        trace.append("template_alpha")
    else:
        sketch = backend.generate(GenRequest("asset_alpha", prompt, seed, w, h))[:, :, 0]
        trace.append("asset_alpha")
    support = sketch >= 0.5
    if not support.any():
        raise MissingAlpha("alpha stage produced an empty mask")
    empty = np.zeros((h, w, 3))
    canvas = composite_over(empty, bg, sketch)
    trace.append("composite")
    tex = backend.generate(GenRequest("asset_texture", prompt, seed, w, h, image=canvas, mask=sketch))
    trace.append("asset_texture")
    ref = backend.generate(GenRequest("asset_refine", prompt, seed, w, h, image=tex))
    trace.append("asset_refine")
    allowed = dilate(support, refine_margin, wrap=False)
    alpha = np.where(allowed, ref[:, :, 3], 0.0)
    return RgbaTexture(np.concatenate([ref[:, :, :3], alpha[:, :, None]], axis=2))
