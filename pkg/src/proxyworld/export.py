"""Scene assembly, panoramic shadow baking, budget accounting and glTF export."""

from __future__ import annotations

import json
import logging
import shutil
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import UnassembledScene, ValidationFailed
from .imageio import write_png
from .meshio import CLAMP, GltfMaterial, GltfNode, GltfPrimitive, write_gltf
from .panorama import ErpImage, cast_erp, erp_uv_to_dir, pixel_dirs
from .raycast import BVH
from .terrain import TerrainMesh

log = logging.getLogger(__name__)

MANIFEST = "scene.manifest.json"
MANIFEST_SCHEMA = "proxyworld.scene/1"
DEFAULT_BUDGET = 250_000
DEFAULT_S_MIN = 0.4
SKY_RADIUS = 5000.0
OCCLUDER_ALPHA = 0.5


@dataclass
class SceneNode:
    """One scene node; geometry is in world space (no transform is applied at export)."""

    name: str
    kind: str  # terrain | sky | asset | effect
    vertices: np.ndarray | None = None
    triangles: np.ndarray | None = None
    texcoords: dict = field(default_factory=dict)  # set -> (n, 2), glTF convention
    # [(material name, texture name, triangle indices, texcoord set, alpha mode)]
    groups: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    @property
    def n_triangles(self):
        return 0 if self.triangles is None else len(self.triangles)


@dataclass
class SceneGraph:
    nodes: list
    textures: dict  # name -> (H, W, C) float raster
    origin: np.ndarray
    terrain: TerrainMesh
    assets: list = field(default_factory=list)
    effects: list = field(default_factory=list)
    audio: dict = field(default_factory=dict)
    shadow: ErpImage | None = None
    bottom_transform: dict | None = None

    def node(self, name):
        return next(n for n in self.nodes if n.name == name)


@dataclass
class BudgetReport:
    primitive_count: int
    texture_bytes: int
    per_node: dict
    budget: int

    @property
    def passed(self):
        return self.primitive_count <= self.budget

    def to_dict(self):
        return {"primitive_count": self.primitive_count, "texture_bytes": self.texture_bytes,
                "per_node": self.per_node, "budget": self.budget, "pass": self.passed}


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def sky_dome(origin, radius=SKY_RADIUS, n_u=64, n_v=32):
    """Latitude/longitude sphere with ERP texture coordinates and a duplicated seam column.

    Triangles face inward. Pole rows use single triangles so none is degenerate.
    """
    us = np.arange(n_u + 1) / n_u
    vs = np.arange(n_v + 1) / n_v
    uu, vv = np.meshgrid(us, vs)
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    verts = np.asarray(origin, float) + radius * erp_uv_to_dir(uv)
    tris = []
    row = n_u + 1
    for i in range(n_v):
        for j in range(n_u):
            a, b = i * row + j, i * row + j + 1
            c, d = a + row, b + row
            # viewed from inside: counter-clockwise when looking outward
            if i > 0:
                tris.append((a, b, c))
            if i < n_v - 1:
                tris.append((b, d, c))
    gl_uv = np.stack([uv[:, 0], 1.0 - uv[:, 1]], axis=1)
    return verts, np.array(tris, np.int64), gl_uv


def terrain_node(terrain: TerrainMesh):
    """Terrain node: panoramic triangles on TEXCOORD_0, bottom triangles on TEXCOORD_1."""
    if terrain.uv0 is None:
        raise ValidationFailed(["terrain: panoramic UVs missing"])
    tc = {0: np.stack([terrain.uv0[:, 0], 1.0 - terrain.uv0[:, 1]], axis=1)}
    flag = terrain.bottom_flag if terrain.bottom_flag is not None else np.zeros(terrain.n_triangles, bool)
    groups = [("terrain_pano", "terrain_pano", np.flatnonzero(~flag), 0, "MASK")]
    if flag.any():
        # world (x, z); the material's texture transform maps it into the bottom square
        tc[1] = terrain.vertices[:, [0, 2]].copy()
        groups.append(("terrain_bottom", "terrain_bottom", np.flatnonzero(flag), 1, "OPAQUE"))
    return SceneNode("terrain", "terrain", terrain.vertices, terrain.triangles, tc, groups)


def bottom_texture_transform(bottom_square):
    cx, cz, side = bottom_square
    return {"offset": [0.5 - cx / side, 0.5 - cz / side], "scale": [1.0 / side, 1.0 / side]}


def asset_node(i, asset):
    groups = []
    for name, idx in asset.groups:
        groups.append((f"asset_{i:03d}_{name}", f"asset_{i:03d}_{name}", np.asarray(idx), 0, "BLEND"))
    extras = {"kind": asset.kind, "anchor": [float(x) for x in asset.anchor],
              "yaw": float(asset.yaw), "size": [float(s) for s in asset.size]}
    if asset.template_id:
        extras["template_id"] = asset.template_id
    return SceneNode(f"asset_{i:03d}", "asset", asset.vertices, asset.triangles, {0: asset.uvs},
                     groups, extras)


def assemble_scene(terrain, sky, assets=(), effects=(), audio=None, origin=None, textures=None,
                   terrain_texture=None, bottom_texture=None):
    """Link terrain, sky dome, proxies and effects into a validated :class:`SceneGraph`.

    ``textures`` may pre-populate the texture registry; the terrain, bottom,
    sky and asset textures are registered under their node-derived names.
    Missing references raise ValidationFailed naming every offending node.
    """
    if origin is None:
        raise ValidationFailed(["scene: origin missing"])
    origin = np.asarray(origin, float)
    tex = dict(textures or {})
    if terrain_texture is not None:
        tex["terrain_pano"] = np.asarray(terrain_texture, float)
    if bottom_texture is not None:
        tex["terrain_bottom"] = np.asarray(bottom_texture, float)
    if sky is not None:
        tex["sky"] = np.asarray(sky.data if isinstance(sky, ErpImage) else sky, float)

    nodes = [terrain_node(terrain)]
    sv, st, suv = sky_dome(origin)
    nodes.append(SceneNode("sky_dome", "sky", sv, st, {0: suv},
                           [("sky", "sky", np.arange(len(st)), 0, "OPAQUE")]))
    for i, a in enumerate(assets):
        node = asset_node(i, a)
        for (_, tname, _, _, _), (gname, _) in zip(node.groups, a.groups):
            t = a.textures.get(gname)
            if t is not None:
                tex[tname] = t.data
        nodes.append(node)
    for e in effects:
        nodes.append(SceneNode(f"effect_{e.effect}", "effect",
                               extras={"effect": e.effect, "target": e.target}))

    scene = SceneGraph(nodes, tex, origin, terrain, list(assets), list(effects), dict(audio or {}))
    if terrain.bottom_square is not None and terrain.bottom_flag is not None and terrain.bottom_flag.any():
        scene.bottom_transform = bottom_texture_transform(terrain.bottom_square)
    validate_scene(scene)
    return scene


def validate_scene(scene: SceneGraph):
    problems = []
    names = [n.name for n in scene.nodes]
    if len(set(names)) != len(names):
        problems.append("scene: duplicate node names")
    if not np.all(np.isfinite(scene.origin)):
        problems.append("scene: origin is not finite")
    for n in scene.nodes:
        if n.vertices is not None:
            if not np.all(np.isfinite(n.vertices)):
                problems.append(f"{n.name}: non-finite vertex positions")
            if n.triangles.size and (n.triangles.min() < 0 or n.triangles.max() >= len(n.vertices)):
                problems.append(f"{n.name}: triangle index out of range")
            covered = np.zeros(n.n_triangles, int)
            for _, tname, idx, tset, _ in n.groups:
                covered[idx] += 1
                if tname not in scene.textures or scene.textures[tname] is None:
                    problems.append(f"{n.name}: missing texture {tname!r}")
                if any(k not in n.texcoords for k in range(tset + 1)):
                    problems.append(f"{n.name}: missing TEXCOORD_{tset}")
            if np.any(covered != 1):
                problems.append(f"{n.name}: material groups do not partition its triangles")
    for e in scene.effects:
        try:
            e.validate()
        except ValueError as exc:
            problems.append(f"effect_{e.effect}: {exc}")
        if e.target not in names:
            problems.append(f"effect_{e.effect}: target {e.target!r} is not a scene node")
        for role, tname in e.textures.items():
            if tname not in scene.textures:
                problems.append(f"effect_{e.effect}: missing texture {tname!r}")
    if problems:
        raise ValidationFailed(problems)
    return scene


# ---------------------------------------------------------------------------
# shadow bake
# ---------------------------------------------------------------------------

def _texel_alpha(asset, tri, bary):
    """Alpha of ``asset``'s texture at barycentric ``bary`` of triangle ``tri``."""
    corners = asset.triangles[tri]
    b1, b2 = bary[:, 0:1], bary[:, 1:2]
    uv = (1 - b1 - b2) * asset.uvs[corners[:, 0]] + b1 * asset.uvs[corners[:, 1]] + b2 * asset.uvs[corners[:, 2]]
    alpha = np.ones(len(tri))
    for name, idx in asset.groups:
        t = asset.textures.get(name)
        if t is None:
            continue
        sel = np.isin(tri, idx)
        if not sel.any():
            continue
        a = t.alpha
        h, w = a.shape
        col = np.clip((uv[sel, 0] * w).astype(np.int64), 0, w - 1)
        row = np.clip((uv[sel, 1] * h).astype(np.int64), 0, h - 1)
        alpha[sel] = a[row, col]
    return alpha


def _asset_occlusion(assets, origins, dirs, max_layers=16):
    """Rays blocked by any asset texel with alpha >= 0.5; transparent hits are stepped over."""
    if not assets:
        return np.zeros(len(origins), bool)
    voff = np.cumsum([0] + [len(a.vertices) for a in assets])
    toff = np.cumsum([0] + [len(a.triangles) for a in assets])
    verts = np.concatenate([a.vertices for a in assets])
    tris = np.concatenate([a.triangles + voff[i] for i, a in enumerate(assets)])
    owner = np.repeat(np.arange(len(assets)), np.diff(toff))
    bvh = BVH(verts, tris)
    occluded = np.zeros(len(origins), bool)
    origins = np.array(origins, float)
    active = np.arange(len(origins))
    for _ in range(max_layers):
        if not len(active):
            break
        hits = bvh.intersect(origins[active], dirs[active], tmin=1e-6)
        active, t = active[hits.hit], hits.t[hits.hit]
        tri, bary = hits.tri[hits.hit], hits.bary[hits.hit]
        alpha = np.ones(len(active))
        a_id = owner[tri]
        for k in np.unique(a_id):
            sel = a_id == k
            alpha[sel] = _texel_alpha(assets[k], tri[sel] - toff[k], bary[sel])
        solid = alpha >= OCCLUDER_ALPHA
        occluded[active[solid]] = True
        origins[active[~solid]] += (t[~solid] + 1e-5)[:, None] * dirs[active[~solid]]
        active = active[~solid]
    return occluded


def bake_shadow(scene, sun_dir, resolution, s_min=DEFAULT_S_MIN, blur=True, tmin=1e-3):
    """Panoramic shadow factors sampled at each texel's terrain hit.

    ``sun_dir`` is the direction light travels; shadow rays go toward
    ``-sun_dir``. Occluders are the terrain itself and asset texels with
    alpha >= 0.5. Texels seeing sky are lit.
    """
    if not isinstance(scene, SceneGraph) or not scene.nodes:
        raise UnassembledScene("bake_shadow needs an assembled scene")
    sun = np.asarray(sun_dir, float)
    n = np.linalg.norm(sun)
    if n < 1e-12:
        raise ValueError("sun direction must be non-zero")
    to_sun = -sun / n
    terrain = scene.terrain
    tbvh = terrain.bvh()
    hits = cast_erp(tbvh, scene.origin, resolution)
    dirs = pixel_dirs(resolution, resolution // 2).reshape(-1, 3)
    pts = scene.origin + hits.t[:, None] * dirs
    lit = np.ones(len(dirs))
    sel = np.flatnonzero(hits.hit)
    if len(sel):
        o = pts[sel]
        d = np.broadcast_to(to_sun, o.shape).copy()
        blocked = tbvh.occluded(o, d, tmin=tmin)
        rest = ~blocked
        if scene.assets and rest.any():
            blocked[rest] = _asset_occlusion(scene.assets, o[rest], d[rest])
        lit[sel[blocked]] = s_min
    img = lit.reshape(resolution // 2, resolution)
    if blur:
        img = ndimage.uniform_filter(img, size=3, mode=("nearest", "wrap"))
    return ErpImage(np.clip(img, s_min, 1.0))


# ---------------------------------------------------------------------------
# budget
# ---------------------------------------------------------------------------

def texture_bytes(raster):
    """GPU footprint assuming 8-bit channels (3-channel rasters uploaded as RGBA)."""
    a = np.asarray(raster)
    c = 1 if a.ndim == 2 else a.shape[2]
    c = 4 if c == 3 else c
    return int(a.shape[0] * a.shape[1] * c)


def budget_report(scene, budget=DEFAULT_BUDGET):
    per_node = {}
    total = 0
    for n in scene.nodes:
        per_node[n.name] = n.n_triangles
        total += n.n_triangles
    used = sorted({g[1] for n in scene.nodes for g in n.groups}
                  | {t for e in scene.effects for t in e.textures.values()})
    tb = sum(texture_bytes(scene.textures[t]) for t in used if t in scene.textures)
    if scene.shadow is not None:
        tb += texture_bytes(scene.shadow.data)
    return BudgetReport(total, tb, per_node, int(budget))


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _compact(vertices, triangles, texcoords):
    used, inv = np.unique(triangles.ravel(), return_inverse=True)
    return (vertices[used], inv.reshape(-1, 3), {k: v[used] for k, v in texcoords.items()})


def export_scene(scene: SceneGraph, out_dir, budget=DEFAULT_BUDGET, extra_files=None):
    """Write ``scene.gltf``/``scene.bin``, PNG textures and the JSON manifest.

    Returns the manifest dict. ``extra_files`` maps manifest keys to
    already-written relative paths (audio, effect textures).
    """
    validate_scene(scene)
    out = Path(out_dir)
    (out / "textures").mkdir(parents=True, exist_ok=True)
    materials, mat_index, gl_nodes = [], {}, []
    written = {}

    def tex_uri(name):
        if name not in written:
            rel = f"textures/{name}.png"
            write_png(out / rel, np.clip(scene.textures[name], 0.0, 1.0))
            written[name] = rel
        return written[name]

    for node in scene.nodes:
        prims = []
        for mname, tname, idx, tset, mode in node.groups:
            if mname not in mat_index:
                transform = scene.bottom_transform if tset == 1 else None
                materials.append(GltfMaterial(mname, tex_uri(tname), mode, 0.5, tset, transform,
                                              double_sided=node.kind in ("asset", "sky"), wrap_t=CLAMP))
                mat_index[mname] = len(materials) - 1
            # glTF wants texcoord sets contiguous from 0, so set 1 travels with set 0
            sets = {k: node.texcoords[k] for k in range(tset + 1)}
            v, t, tc = _compact(node.vertices, node.triangles[idx], sets)
            prims.append(GltfPrimitive(v, t, mat_index[mname], tc))
        extras = dict(node.extras) if node.extras else {}
        if node.kind == "terrain" and scene.shadow is not None:
            extras["shadow_map"] = "textures/shadow.png"
            extras["shadow_uv"] = "TEXCOORD_0"
        gl_nodes.append(GltfNode(node.name, prims, extras=extras or None))

    if scene.shadow is not None:
        write_png(out / "textures" / "shadow.png", scene.shadow.plane())
    for e in scene.effects:
        for tname in e.textures.values():
            tex_uri(tname)
    write_gltf(out / "scene.gltf", gl_nodes, materials)

    report = budget_report(scene, budget)
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "gltf": "scene.gltf",
        "origin": [float(x) for x in scene.origin],
        "nodes": [{"name": n.name, "kind": n.kind, "triangles": n.n_triangles} for n in scene.nodes],
        "shadow": ({"texture": "textures/shadow.png", "uv": "terrain TEXCOORD_0",
                    "usage": "multiply base color at runtime or pre-multiply at import"}
                   if scene.shadow is not None else None),
        "effects": [dict(e.to_dict(), textures={k: written[v] for k, v in sorted(e.textures.items())})
                    for e in scene.effects],
        "audio": scene.audio,
        "budget": report.to_dict(),
    }
    for k, v in sorted((extra_files or {}).items()):
        manifest[k] = v
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# external validation
# ---------------------------------------------------------------------------

TOOLS_DIR = Path(__file__).resolve().parents[2] / "tools"


def validator_command():
    """Command prefix for the Khronos glTF validator, or None if not installed."""
    script = TOOLS_DIR / "gltf_validate.js"
    module = TOOLS_DIR / "node_modules" / "gltf-validator"
    node = shutil.which("node")
    if node and script.exists() and module.exists():
        return [node, str(script)]
    return None


def validate_gltf(path, command=None):
    """Run the external validator; returns its report dict (``issues.numErrors`` etc.)."""
    command = command or validator_command()
    if command is None:
        raise FileNotFoundError("glTF validator not installed; run `npm install --prefix tools`")
    proc = subprocess.run([*command, str(path)], capture_output=True, text=True, timeout=300)
    if proc.returncode not in (0, 1):
        raise RuntimeError(f"validator crashed: {proc.stderr.strip()}")
    return json.loads(proc.stdout)


def check_manifest(out_dir):
    """Offline structural checks: every referenced file exists, every material unlit."""
    out = Path(out_dir)
    problems = []
    manifest = json.loads((out / MANIFEST).read_text())
    doc = json.loads((out / manifest["gltf"]).read_text())
    for img in doc.get("images", []):
        if not (out / img["uri"]).exists():
            problems.append(f"missing image {img['uri']}")
    for m in doc.get("materials", []):
        if "KHR_materials_unlit" not in m.get("extensions", {}):
            problems.append(f"material {m.get('name')} is not unlit")
    for e in manifest.get("effects", []):
        for rel in e["textures"].values():
            if not (out / rel).exists():
                problems.append(f"missing effect texture {rel}")
    audio = manifest.get("audio") or {}
    if audio.get("file") and not (out / audio["file"]).exists():
        problems.append(f"missing audio {audio['file']}")
    return problems
