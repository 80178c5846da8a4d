"""Equirectangular (ERP) projection, panoramic depth rendering, tiling and cubemaps.

Conventions used throughout the package:

* Camera frame is right-handed, ``+y`` up, ``-z`` forward. ``u`` is azimuth
  (``u = 0.5`` looks down ``-z``, ``u = 0.75`` down ``+x``), ``v`` is
  elevation with ``v = 0`` at the nadir and ``v = 1`` at the zenith.
* Rasters are ``(H, W, C)`` arrays with row 0 at the top (zenith), so pixel
  ``(col, row)`` has centre ``u = (col + 0.5) / W`` and ``v = 1 - (row + 0.5) / H``.
* Horizontal reads wrap, vertical reads clamp.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadTiling, CoverageGap, DegenerateMesh, ZeroVector
from .raycast import BVH, Hits

SKY_DEPTH = 1e9
TWO_PI = 2.0 * np.pi


@dataclass
class ErpImage:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or not 1 <= data.shape[2] <= 4:
            raise ValueError(f"ERP data must be (H, W, 1..4), got {data.shape}")
        if data.shape[1] != 2 * data.shape[0]:
            raise ValueError(f"ERP width must be twice the height, got {data.shape[:2]}")
        self.data = data

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def plane(self, c=0):
        return self.data[:, :, c]

    def copy(self):
        return ErpImage(self.data.copy())


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def dir_to_erp_uv(d):
    """Map direction(s) ``(..., 3)`` to ERP ``(..., 2)`` with ``u`` in ``[0, 1)``.

    Directions are normalized internally; the zero vector raises ZeroVector.
    """
    d = np.asarray(d, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1)
    if np.any(norm < 1e-9):
        raise ZeroVector("direction has (near) zero length")
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    u = np.arctan2(x, -z) / TWO_PI + 0.5
    u = np.mod(u, 1.0)
    u = np.where(u >= 1.0, 0.0, u)
    v = np.arcsin(np.clip(y / norm, -1.0, 1.0)) / np.pi + 0.5
    return np.stack([u, v], axis=-1)


def erp_uv_to_dir(uv):
    """Inverse of :func:`dir_to_erp_uv`; returns unit vectors ``(..., 3)``."""
    uv = np.asarray(uv, dtype=np.float64)
    lon = (uv[..., 0] - 0.5) * TWO_PI
    lat = (uv[..., 1] - 0.5) * np.pi
    c = np.cos(lat)
    return np.stack([c * np.sin(lon), np.sin(lat), -c * np.cos(lon)], axis=-1)


def pixel_uv(width, height):
    """UV of every pixel centre, shape ``(H, W, 2)``."""
    u = (np.arange(width) + 0.5) / width
    v = 1.0 - (np.arange(height) + 0.5) / height
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def pixel_dirs(width, height):
    return erp_uv_to_dir(pixel_uv(width, height))


def uv_to_pixel(uv, width, height):
    """Continuous pixel coordinates ``(x, y)`` where integer+0.5 is a centre."""
    uv = np.asarray(uv, dtype=np.float64)
    return uv[..., 0] * width, (1.0 - uv[..., 1]) * height


def sample_bilinear(data, uv):
    """Bilinear read of an ``(H, W, C)`` raster at ``uv``; wraps u, clamps v."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    h, w = data.shape[:2]
    x, y = uv_to_pixel(uv, w, h)
    x = x - 0.5
    y = np.clip(y - 0.5, 0.0, h - 1.0)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa = np.mod(x0, w)
    xb = np.mod(x0 + 1, w)
    ya = y0
    yb = np.minimum(y0 + 1, h - 1)
    top = data[ya, xa] + fx * (data[ya, xb] - data[ya, xa])
    bot = data[yb, xa] + fx * (data[yb, xb] - data[yb, xa])
    return top + fy * (bot - top)


def sample_nearest(data, uv):
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[:, :, None]
    h, w = data.shape[:2]
    x, y = uv_to_pixel(uv, w, h)
    xi = np.mod(np.floor(x).astype(np.int64), w)
    yi = np.clip(np.floor(y).astype(np.int64), 0, h - 1)
    return data[yi, xi]


# ---------------------------------------------------------------------------
# depth rendering
# ---------------------------------------------------------------------------

def triangle_areas(vertices, triangles):
    v = np.asarray(vertices, float)[np.asarray(triangles)]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def check_mesh(vertices, triangles, area_tol=1e-12, max_degenerate=0):
    triangles = np.asarray(triangles)
    if triangles.size == 0:
        raise DegenerateMesh("mesh has no triangles")
    if triangles.min() < 0 or triangles.max() >= len(vertices):
        raise DegenerateMesh("triangle index out of range")
    bad = int(np.count_nonzero(triangle_areas(vertices, triangles) <= area_tol))
    if bad > max_degenerate:
        raise DegenerateMesh(f"{bad} zero-area triangles (allowed {max_degenerate})")


def cast_erp(bvh: BVH, origin, width) -> Hits:
    """Cast one ray per pixel centre of a ``width x width/2`` panorama."""
    height = width // 2
    dirs = pixel_dirs(width, height).reshape(-1, 3)
    return bvh.intersect(np.asarray(origin, float), dirs)


def render_erp_depth(mesh, origin, resolution, bvh=None) -> ErpImage:
    """Panoramic Euclidean depth (meters) of ``mesh`` seen from ``origin``.

    ``resolution`` is the panorama width. Sky pixels hold ``SKY_DEPTH``.
    """
    if bvh is None:
        check_mesh(mesh.vertices, mesh.triangles)
        bvh = BVH(mesh.vertices, mesh.triangles)
    height = resolution // 2
    hits = cast_erp(bvh, origin, resolution)
    depth = np.where(hits.hit, hits.t, SKY_DEPTH)
    return ErpImage(depth.reshape(height, resolution))


# ---------------------------------------------------------------------------
# circular tiling
# ---------------------------------------------------------------------------

@dataclass
class Tile:
    x_origin: int
    data: np.ndarray


@dataclass
class TileSet:
    tile_size: int
    overlap: int
    width: int
    tiles: list = field(default_factory=list)

    def columns(self, k):
        t = self.tiles[k]
        return np.mod(t.x_origin + np.arange(t.data.shape[1]), self.width)


def tile_origins(width, tile_size, overlap):
    if tile_size > width or tile_size <= 0:
        raise BadTiling(f"tile_size {tile_size} must be in (0, {width}]")
    if overlap < 0 or overlap >= tile_size:
        raise BadTiling(f"overlap {overlap} must be in [0, tile_size)")
    if tile_size == width:
        return [0]
    stride = tile_size - overlap
    if stride <= 0:
        raise BadTiling("stride must be positive")
    n = -(-width // stride)
    return [k * stride for k in range(n)]


def tile_split(img, tile_size, overlap) -> TileSet:
    """Cut full-height strips with circular padding across the right edge."""
    data = img.data if isinstance(img, ErpImage) else np.asarray(img, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    width = data.shape[1]
    ts = TileSet(tile_size, overlap, width)
    for x0 in tile_origins(width, tile_size, overlap):
        cols = np.mod(x0 + np.arange(tile_size), width)
        ts.tiles.append(Tile(x0, data[:, cols].copy()))
    return ts


def ramp_weights(tile_size, overlap):
    """Per-column blend weight of one tile: linear ramps over ``overlap`` columns."""
    j = np.arange(tile_size, dtype=np.float64)
    if overlap == 0:
        return np.ones(tile_size)
    return np.minimum(1.0, np.minimum(j + 1.0, tile_size - j) / (overlap + 1.0))


def tile_weights(tiles: TileSet):
    """Normalized per-tile column weights; columns sum to one."""
    acc = np.zeros(tiles.width)
    raw = []
    for k, t in enumerate(tiles.tiles):
        w = ramp_weights(t.data.shape[1], tiles.overlap)
        np.add.at(acc, tiles.columns(k), w)
        raw.append(w)
    if np.any(acc <= 0):
        raise CoverageGap(f"{int(np.count_nonzero(acc <= 0))} columns not covered")
    return [w / acc[tiles.columns(k)] for k, w in enumerate(raw)]


def tile_merge(tiles: TileSet, width=None, height=None) -> np.ndarray:
    """Blend tiles back into a full ``(H, W, C)`` raster.

    Tiles are folded in with a running lerp so that identical samples from
    overlapping tiles reproduce the input bit-exactly.
    """
    width = tiles.width if width is None else width
    if not tiles.tiles:
        raise CoverageGap("no tiles")
    first = tiles.tiles[0].data
    if first.ndim == 2:
        first = first[:, :, None]
    h = first.shape[0] if height is None else height
    out = np.zeros((h, width, first.shape[2]))
    acc = np.zeros(width)
    for k, t in enumerate(tiles.tiles):
        data = t.data if t.data.ndim == 3 else t.data[:, :, None]
        if data.shape[0] != h or data.shape[2] != out.shape[2]:
            raise ValueError("tiles disagree in height or channel count")
        cols = tiles.columns(k)
        w = ramp_weights(data.shape[1], tiles.overlap)
        # a tile never covers the same column twice (tile_size <= width)
        new_acc = acc[cols] + w
        frac = (w / new_acc)[None, :, None]
        cur = out[:, cols]
        out[:, cols] = cur + frac * (data - cur)
        acc[cols] = new_acc
    if np.any(acc <= 0):
        raise CoverageGap(f"{int(np.count_nonzero(acc <= 0))} columns not covered")
    return out


# ---------------------------------------------------------------------------
# cubemap
# ---------------------------------------------------------------------------

# face -> (forward, right, up); right x up == -forward for every face
FACE_BASIS = {
    "+X": ((1, 0, 0), (0, 0, 1), (0, 1, 0)),
    "-X": ((-1, 0, 0), (0, 0, -1), (0, 1, 0)),
    "+Y": ((0, 1, 0), (1, 0, 0), (0, 0, 1)),
    "-Y": ((0, -1, 0), (1, 0, 0), (0, 0, -1)),
    "+Z": ((0, 0, 1), (-1, 0, 0), (0, 1, 0)),
    "-Z": ((0, 0, -1), (1, 0, 0), (0, 1, 0)),
}


@dataclass
class CubemapFace:
    face_id: str
    resolution: int
    data: np.ndarray


def face_directions(face_id, resolution, corners=False):
    """Unit directions through texel centres (or texel corners) of a face."""
    fwd, right, up = (np.asarray(b, float) for b in FACE_BASIS[face_id])
    if corners:
        s = np.linspace(-1.0, 1.0, resolution + 1)
    else:
        s = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    a, b = np.meshgrid(s, s)
    d = fwd + a[..., None] * right - b[..., None] * up
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def erp_to_cubemap_face(img, face_id, resolution) -> CubemapFace:
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if face_id not in FACE_BASIS:
        raise ValueError(f"unknown face {face_id!r}")
    data = img.data if isinstance(img, ErpImage) else np.asarray(img, float)
    uv = dir_to_erp_uv(face_directions(face_id, resolution))
    return CubemapFace(face_id, resolution, sample_bilinear(data, uv))


def erp_to_cubemap(img, resolution):
    return {f: erp_to_cubemap_face(img, f, resolution) for f in FACE_BASIS}
