"""Terrain proxies: template retrieval, user-centric panoramic UVs, bottom map, displacement."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import EmptyLibrary, MissingTags, VertexAtOrigin
from .panorama import (ErpImage, SKY_DEPTH, cast_erp, check_mesh, dir_to_erp_uv,
                       sample_bilinear, sample_nearest)
from .raycast import BVH

GROUND = "ground"
WATER = "water"
DEFAULT_EYE_HEIGHT = 1.7
DEFAULT_PITCH_THRESHOLD = 55.0


@dataclass
class TerrainMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    uv0: np.ndarray | None = None
    uv1: np.ndarray | None = None
    region_tags: np.ndarray | None = None
    bottom_flag: np.ndarray | None = None
    # (center_x, center_z, side) of the square the bottom UVs are normalized to
    bottom_square: tuple | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.region_tags is not None:
            self.region_tags = np.asarray(self.region_tags, dtype="<U6")
        if self.bottom_flag is not None:
            self.bottom_flag = np.asarray(self.bottom_flag, dtype=bool)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def copy(self):
        cp = lambda a: None if a is None else a.copy()  # noqa: E731
        return replace(self, vertices=self.vertices.copy(), triangles=self.triangles.copy(),
                       uv0=cp(self.uv0), uv1=cp(self.uv1), region_tags=cp(self.region_tags),
                       bottom_flag=cp(self.bottom_flag))

    def validate(self):
        check_mesh(self.vertices, self.triangles)
        return self

    def bvh(self):
        return BVH(self.vertices, self.triangles)


@dataclass
class TerrainTemplate:
    id: str
    mesh_path: str
    caption: str
    tags: tuple = ()
    water_present: bool = False
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# library
# ---------------------------------------------------------------------------

def load_template_library(index_path):
    """Read a JSON index ``{"templates": [{id, mesh, caption, tags, water}]}``."""
    index_path = Path(index_path)
    doc = json.loads(index_path.read_text())
    out = []
    for entry in doc["templates"]:
        if not entry.get("caption"):
            raise ValueError(f"template {entry.get('id')!r} has an empty caption")
        out.append(TerrainTemplate(
            id=entry["id"],
            mesh_path=str(index_path.parent / entry["mesh"]),
            caption=entry["caption"],
            tags=tuple(sorted(entry.get("tags", []))),
            water_present=bool(entry.get("water", False)),
        ))
    ids = [t.id for t in out]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate template ids in library")
    return out


def keyword_score(query, tags):
    query = set(query)
    if not query:
        return 0.0
    return len(query & set(tags)) / len(query)


def retrieve_template(library, query):
    """Best keyword overlap ``|query & tags| / |query|``; ties go to the smallest id."""
    if not library:
        raise EmptyLibrary("terrain template library is empty")
    return min(library, key=lambda t: (-keyword_score(query, t.tags), t.id))


# ---------------------------------------------------------------------------
# viewer origin
# ---------------------------------------------------------------------------

def surface_height(bvh, x, z, top=1e5):
    """Terrain height below ``(x, z)`` or ``None`` if the column misses."""
    hits = bvh.intersect(np.array([x, top, z]), np.array([[0.0, -1.0, 0.0]]))
    if not hits.hit[0]:
        return None
    return top - hits.t[0]


def default_origin(mesh, eye_height=DEFAULT_EYE_HEIGHT, bvh=None):
    bvh = bvh or mesh.bvh()
    y = surface_height(bvh, 0.0, 0.0)
    if y is None:
        raise ValueError("terrain does not cover the scene center (0, 0)")
    return np.array([0.0, y + eye_height, 0.0])


# ---------------------------------------------------------------------------
# panoramic UVs
# ---------------------------------------------------------------------------

def assign_panoramic_uv(mesh, origin):
    """Set ``uv0`` of every vertex from its direction as seen from ``origin``."""
    out = mesh.copy()
    p = out.vertices - np.asarray(origin, float)
    if np.any(np.linalg.norm(p, axis=1) < 1e-6):
        raise VertexAtOrigin("a vertex coincides with the viewer origin")
    out.uv0 = dir_to_erp_uv(p)
    return out


def triangle_u_span(mesh):
    u = mesh.uv0[mesh.triangles, 0]
    return u.max(axis=1) - u.min(axis=1)


def fix_seam_uvs(mesh):
    """Shift seam-crossing triangles past ``u = 1`` so they interpolate across the wrap.

    Vertices shared with non-crossing triangles are duplicated; duplicates are
    shared among all crossing triangles that reference the same original.
    """
    out = mesh.copy()
    tri = out.triangles
    u = out.uv0[tri, 0]
    crossing = (u.max(axis=1) - u.min(axis=1)) > 0.5
    shift = crossing[:, None] & (u < 0.5)
    if not shift.any():
        return out
    src = np.unique(tri[shift])
    new_ids = np.arange(len(out.vertices), len(out.vertices) + len(src))
    remap = dict(zip(src.tolist(), new_ids.tolist()))
    flat = tri[shift]
    tri[shift] = np.fromiter((remap[i] for i in flat.tolist()), np.int64, len(flat))
    out.vertices = np.concatenate([out.vertices, out.vertices[src]])
    dup_uv = out.uv0[src].copy()
    dup_uv[:, 0] += 1.0
    out.uv0 = np.concatenate([out.uv0, dup_uv])
    if out.uv1 is not None:
        out.uv1 = np.concatenate([out.uv1, out.uv1[src]])
    out.triangles = tri
    return out


def encloses_pole(mesh, origin):
    """Triangles whose projection around the view axis contains a pole.

    Such triangles span every azimuth, so no UV shift can make them compact.
    """
    p = mesh.vertices[mesh.triangles] - np.asarray(origin, float)
    a, b, c = p[:, 0, [0, 2]], p[:, 1, [0, 2]], p[:, 2, [0, 2]]

    def cross(o, q):
        return o[:, 0] * q[:, 1] - o[:, 1] * q[:, 0]

    s1, s2, s3 = cross(a, b), cross(b, c), cross(c, a)
    return ((s1 >= 0) & (s2 >= 0) & (s3 >= 0)) | ((s1 <= 0) & (s2 <= 0) & (s3 <= 0))


# ---------------------------------------------------------------------------
# bottom partition
# ---------------------------------------------------------------------------

def partition_bottom(mesh, origin, pitch_threshold=DEFAULT_PITCH_THRESHOLD):
    """Flag triangles seen more than ``pitch_threshold`` degrees below the horizon.

    Flagged triangles get top-down ``uv1`` = ``(x, z)`` normalized to the
    bounding square of the flagged region (centered, side = larger extent).
    """
    out = mesh.copy()
    origin = np.asarray(origin, float)
    cen = out.vertices[out.triangles].mean(axis=1) - origin
    elev = np.degrees(np.arcsin(np.clip(cen[:, 1] / np.linalg.norm(cen, axis=1), -1, 1)))
    flag = elev < -pitch_threshold
    out.bottom_flag = flag
    out.uv1 = np.full((len(out.vertices), 2), np.nan)
    if not flag.any():
        out.bottom_square = None
        return out
    used = np.unique(out.triangles[flag])
    xz = out.vertices[used][:, [0, 2]]
    lo, hi = xz.min(axis=0), xz.max(axis=0)
    center = (lo + hi) / 2.0
    side = float(max(hi - lo))
    side = side if side > 0 else 1.0
    out.uv1[used] = (xz - center) / side + 0.5
    out.bottom_square = (float(center[0]), float(center[1]), side)
    return out


def bottom_interior_vertices(mesh):
    """Vertices all of whose incident triangles are bottom-flagged."""
    flag = mesh.bottom_flag
    n = len(mesh.vertices)
    touched_bottom = np.zeros(n, bool)
    touched_other = np.zeros(n, bool)
    touched_bottom[mesh.triangles[flag].ravel()] = True
    touched_other[mesh.triangles[~flag].ravel()] = True
    return touched_bottom & ~touched_other


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def render_mask(mesh, origin, resolution, selector="terrain", bvh=None) -> ErpImage:
    """Binary panorama: terrain coverage, or the water-tagged subset."""
    if selector not in ("terrain", "water"):
        raise ValueError(f"unknown selector {selector!r}")
    if selector == "water" and mesh.region_tags is None:
        raise MissingTags("water mask requested but the mesh carries no region tags")
    bvh = bvh or mesh.bvh()
    hits = cast_erp(bvh, origin, resolution)
    if selector == "terrain":
        m = hits.hit
    else:
        tags = mesh.region_tags[np.maximum(hits.tri, 0)]
        m = hits.hit & (tags == WATER)
    return ErpImage(m.astype(np.float64).reshape(resolution // 2, resolution))


def depth_to_terrain_mask(depth: ErpImage) -> ErpImage:
    return ErpImage((depth.data < SKY_DEPTH).astype(np.float64))


# ---------------------------------------------------------------------------
# displacement
# ---------------------------------------------------------------------------

def highpass(height_map, radius):
    """``h - boxblur(h)`` with a ``(2r+1)^2`` box and periodic edges."""
    h = np.asarray(height_map, dtype=np.float64)
    if h.ndim == 3:
        h = h[:, :, 0]
    if radius <= 0:
        return np.zeros_like(h)
    return h - ndimage.uniform_filter(h, size=2 * int(radius) + 1, mode="wrap")


def sample_topdown(raster, uv):
    """Bilinear read of a top-down raster whose corner texels sit on the square's edges.

    ``uv = (0, 0)`` is texel ``[0, 0]`` (row = z, column = x); reads wrap.
    """
    r = np.asarray(raster, dtype=np.float64)
    if r.ndim == 3:
        r = r[:, :, 0]
    h, w = r.shape
    x = np.asarray(uv)[..., 0] * (w - 1)
    y = np.asarray(uv)[..., 1] * (h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx, fy = x - x0, y - y0
    xa, xb = np.mod(x0, w), np.mod(x0 + 1, w)
    ya, yb = np.mod(y0, h), np.mod(y0 + 1, h)
    top = r[ya, xa] + fx * (r[ya, xb] - r[ya, xa])
    bot = r[yb, xa] + fx * (r[yb, xb] - r[yb, xa])
    return top + fy * (bot - top)


def apply_displacement(mesh, height_map, highpass_radius, scale):
    """Offset interior bottom vertices along +y by ``scale * highpass(h)`` at ``uv1``.

    Vertices on the bottom/panoramic boundary ring stay fixed so the two
    regions remain watertight.
    """
    if mesh.bottom_flag is None or mesh.uv1 is None:
        raise ValueError("partition_bottom must run before apply_displacement")
    out = mesh.copy()
    movable = bottom_interior_vertices(out)
    if not movable.any():
        return out
    detail = highpass(height_map, highpass_radius)
    out.vertices[movable, 1] += scale * sample_topdown(detail, out.uv1[movable])
    return out


# ---------------------------------------------------------------------------
# texturing helpers
# ---------------------------------------------------------------------------

def render_uv_texture(mesh, origin, texture, width, nearest=True, bvh=None):
    """Software render of ``mesh`` textured through its ``uv0`` from ``origin``.

    Used as the reference sampler for seam checks: per-pixel barycentric
    interpolation of stored UVs followed by a wrapped texture read. Misses
    render as NaN.
    """
    bvh = bvh or BVH(mesh.vertices, mesh.triangles)
    hits = cast_erp(bvh, origin, width)
    tri = mesh.triangles[np.maximum(hits.tri, 0)]
    b1, b2 = hits.bary[:, 0:1], hits.bary[:, 1:2]
    uv = (1 - b1 - b2) * mesh.uv0[tri[:, 0]] + b1 * mesh.uv0[tri[:, 1]] + b2 * mesh.uv0[tri[:, 2]]
    sampler = sample_nearest if nearest else sample_bilinear
    col = sampler(texture, uv).astype(np.float64)
    col[~hits.hit] = np.nan
    return col.reshape(width // 2, width, -1)


def bottom_texel_points(mesh, resolution, bvh=None):
    """World points of the bottom map texel centres (row = z, column = x)."""
    cx, cz, side = mesh.bottom_square
    s = ((np.arange(resolution) + 0.5) / resolution - 0.5) * side
    xx, zz = np.meshgrid(cx + s, cz + s)
    bvh = bvh or mesh.bvh()
    top = 1e5
    o = np.stack([xx.ravel(), np.full(xx.size, top), zz.ravel()], axis=1)
    hits = bvh.intersect(o, np.tile([0.0, -1.0, 0.0], (xx.size, 1)))
    y = np.where(hits.hit, top - hits.t, np.nan)
    pts = np.stack([xx.ravel(), y, zz.ravel()], axis=1).reshape(resolution, resolution, 3)
    return pts, hits.hit.reshape(resolution, resolution)


def render_bottom_map(pano, mesh, origin, resolution, bvh=None):
    """Top-down reprojection of the panorama onto the bottom region's square.

    Returns ``(texture, valid)``; texels whose column misses the terrain are
    filled from the nadir direction.
    """
    pts, valid = bottom_texel_points(mesh, resolution, bvh)
    origin = np.asarray(origin, float)
    d = pts - origin
    d[~valid] = (0.0, -1.0, 0.0)
    d[np.linalg.norm(d, axis=-1) < 1e-9] = (0.0, -1.0, 0.0)
    data = pano.data if isinstance(pano, ErpImage) else pano
    return sample_bilinear(data, dir_to_erp_uv(d)), valid


def bottom_region_mask(mesh, origin, resolution, pitch_threshold=DEFAULT_PITCH_THRESHOLD, bvh=None):
    """Texels of the bottom map lying inside the flagged elevation cone."""
    pts, valid = bottom_texel_points(mesh, resolution, bvh)
    d = pts - np.asarray(origin, float)
    n = np.linalg.norm(np.where(valid[..., None], d, 1.0), axis=-1)
    elev = np.degrees(np.arcsin(np.clip(np.where(valid, d[..., 1], 0.0) / n, -1, 1)))
    return valid & (elev < -pitch_threshold)


def feather_bottom_map(refined, reprojected, inside, feather_px=2):
    """Blend the refined bottom map into the reprojection over ``feather_px`` texels."""
    refined = np.asarray(refined, float)
    reprojected = np.asarray(reprojected, float)
    if feather_px <= 0:
        w = inside.astype(float)
    else:
        dist = ndimage.distance_transform_edt(inside)
        w = np.clip(dist / float(feather_px), 0.0, 1.0)
    w = w[..., None]
    return reprojected + w * (refined - reprojected)
