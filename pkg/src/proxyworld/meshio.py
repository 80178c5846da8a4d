"""Mesh I/O: Wavefront OBJ reading and a small glTF 2.0 (JSON + .bin) writer/reader.

The glTF writer only covers what the exporter needs: triangle primitives
with positions, up to two texture coordinate sets, PNG images referenced by
URI, unlit materials and optional texture transforms. Output is byte-stable
for identical input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FLOAT = 5126
UINT32 = 5125
ARRAY_BUFFER = 34962
ELEMENT_ARRAY_BUFFER = 34963
REPEAT = 10497
CLAMP = 33071
LINEAR = 9729
UNLIT = "KHR_materials_unlit"
TEX_TRANSFORM = "KHR_texture_transform"


# ---------------------------------------------------------------------------
# OBJ
# ---------------------------------------------------------------------------

@dataclass
class ObjMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    uvs: np.ndarray | None
    groups: list  # [(name, triangle index array)] in file order


def read_obj(path):
    """Read positions, optional texture coordinates and ``g``/``usemtl`` groups.

    Polygons are fan-triangulated. When a face pairs a position with several
    different texture coordinates the vertex is split so every output vertex
    owns exactly one UV.
    """
    pos, tex = [], []
    corners = {}
    out_pos, out_uv, tris, tri_group = [], [], [], []
    group_names = []
    current = None
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        if key == "v":
            pos.append([float(x) for x in rest[:3]])
        elif key == "vt":
            tex.append([float(x) for x in rest[:2]])
        elif key in ("g", "usemtl", "o"):
            name = rest[0] if rest else "default"
            if key == "o" and current is not None:
                continue
            if name not in group_names:
                group_names.append(name)
            current = name
        elif key == "f":
            idx = []
            for token in rest:
                parts = token.split("/")
                vi = int(parts[0])
                vi = vi - 1 if vi > 0 else len(pos) + vi
                ti = None
                if len(parts) > 1 and parts[1]:
                    ti = int(parts[1])
                    ti = ti - 1 if ti > 0 else len(tex) + ti
                k = (vi, ti)
                if k not in corners:
                    corners[k] = len(out_pos)
                    out_pos.append(pos[vi])
                    out_uv.append(tex[ti] if ti is not None else [np.nan, np.nan])
                idx.append(corners[k])
            if current is None:
                current = "default"
                group_names.append(current)
            for j in range(1, len(idx) - 1):
                tris.append([idx[0], idx[j], idx[j + 1]])
                tri_group.append(group_names.index(current))
    uvs = np.array(out_uv, float) if out_uv else None
    if uvs is not None and np.isnan(uvs).all():
        uvs = None
    tri_group = np.array(tri_group, np.int64)
    groups = [(name, np.flatnonzero(tri_group == g)) for g, name in enumerate(group_names)
              if np.any(tri_group == g)]
    return ObjMesh(np.array(out_pos, float).reshape(-1, 3), np.array(tris, np.int64).reshape(-1, 3),
                   uvs, groups)


def write_obj(path, vertices, triangles, uvs=None, groups=None):
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(vertices, float)]
    if uvs is not None:
        lines += [f"vt {u:.9g} {v:.9g}" for u, v in np.asarray(uvs, float)]
    groups = groups or [("default", np.arange(len(triangles)))]
    for name, idx in groups:
        lines.append(f"g {name}")
        for a, b, c in np.asarray(triangles)[idx] + 1:
            if uvs is None:
                lines.append(f"f {a} {b} {c}")
            else:
                lines.append(f"f {a}/{a} {b}/{b} {c}/{c}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# glTF
# ---------------------------------------------------------------------------

@dataclass
class GltfMaterial:
    name: str
    image_uri: str
    alpha_mode: str = "OPAQUE"  # OPAQUE | MASK | BLEND
    alpha_cutoff: float = 0.5
    texcoord: int = 0
    transform: dict | None = None  # {"offset": [..], "scale": [..]}
    double_sided: bool = False
    wrap_t: int = REPEAT


@dataclass
class GltfPrimitive:
    positions: np.ndarray
    indices: np.ndarray
    material: int | None = None
    texcoords: dict = field(default_factory=dict)  # set index -> (n, 2)


@dataclass
class GltfNode:
    name: str
    primitives: list = field(default_factory=list)  # empty -> node without mesh
    translation: tuple = (0.0, 0.0, 0.0)
    extras: dict | None = None


class _Packer:
    def __init__(self):
        self.blob = bytearray()
        self.views = []
        self.accessors = []

    def add(self, array, component, kind, target, minmax=False):
        array = np.ascontiguousarray(array)
        while len(self.blob) % 4:
            self.blob.append(0)
        self.views.append({"buffer": 0, "byteOffset": len(self.blob),
                           "byteLength": array.nbytes, "target": target})
        self.blob += array.tobytes()
        acc = {"bufferView": len(self.views) - 1, "componentType": component,
               "count": int(array.shape[0]), "type": kind}
        if minmax:
            acc["min"] = [float(x) for x in array.min(axis=0)]
            acc["max"] = [float(x) for x in array.max(axis=0)]
        self.accessors.append(acc)
        return len(self.accessors) - 1


def write_gltf(path, nodes, materials, extras=None, generator="proxyworld"):
    """Write ``<path>`` (.gltf JSON) and a sibling ``.bin`` buffer."""
    path = Path(path)
    bin_name = path.with_suffix(".bin").name
    pk = _Packer()
    meshes, gl_nodes = [], []
    for node in nodes:
        gn = {"name": node.name}
        if any(float(t) != 0.0 for t in node.translation):
            gn["translation"] = [float(t) for t in node.translation]
        if node.extras:
            gn["extras"] = node.extras
        prims = []
        for p in node.primitives:
            pos = np.asarray(p.positions, np.float32).reshape(-1, 3)
            attrs = {"POSITION": pk.add(pos, FLOAT, "VEC3", ARRAY_BUFFER, minmax=True)}
            for k in sorted(p.texcoords):
                uv = np.asarray(p.texcoords[k], np.float32).reshape(-1, 2)
                attrs[f"TEXCOORD_{k}"] = pk.add(uv, FLOAT, "VEC2", ARRAY_BUFFER)
            idx = np.asarray(p.indices, np.uint32).reshape(-1)
            prim = {"attributes": attrs, "indices": pk.add(idx, UINT32, "SCALAR", ELEMENT_ARRAY_BUFFER),
                    "mode": 4}
            if p.material is not None:
                prim["material"] = int(p.material)
            prims.append(prim)
        if prims:
            gn["mesh"] = len(meshes)
            meshes.append({"name": node.name, "primitives": prims})
        gl_nodes.append(gn)

    samplers, sampler_ids = [], {}
    images, textures, mats = [], [], []
    used = {UNLIT}
    for m in materials:
        skey = m.wrap_t
        if skey not in sampler_ids:
            sampler_ids[skey] = len(samplers)
            samplers.append({"magFilter": LINEAR, "minFilter": LINEAR, "wrapS": REPEAT, "wrapT": m.wrap_t})
        images.append({"uri": m.image_uri})
        textures.append({"sampler": sampler_ids[skey], "source": len(images) - 1})
        info = {"index": len(textures) - 1}
        if m.texcoord:
            info["texCoord"] = int(m.texcoord)
        if m.transform:
            used.add(TEX_TRANSFORM)
            tt = {k: [float(x) for x in v] for k, v in m.transform.items()}
            info["extensions"] = {TEX_TRANSFORM: tt}
        mat = {"name": m.name, "pbrMetallicRoughness": {"baseColorTexture": info,
                                                         "metallicFactor": 0.0, "roughnessFactor": 1.0},
               "extensions": {UNLIT: {}}}
        if m.alpha_mode != "OPAQUE":
            mat["alphaMode"] = m.alpha_mode
        if m.alpha_mode == "MASK":
            mat["alphaCutoff"] = float(m.alpha_cutoff)
        if m.double_sided:
            mat["doubleSided"] = True
        mats.append(mat)

    doc = {"asset": {"version": "2.0", "generator": generator},
           "scene": 0, "scenes": [{"nodes": list(range(len(gl_nodes)))}],
           "nodes": gl_nodes, "extensionsUsed": sorted(used)}
    if meshes:
        doc["meshes"] = meshes
        doc["accessors"] = pk.accessors
        doc["bufferViews"] = pk.views
        doc["buffers"] = [{"uri": bin_name, "byteLength": len(pk.blob)}]
    if mats:
        doc["materials"] = mats
        doc["textures"] = textures
        doc["images"] = images
        doc["samplers"] = samplers
    if TEX_TRANSFORM in used:
        doc["extensionsRequired"] = [TEX_TRANSFORM]
    if extras:
        doc["extras"] = extras
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    if meshes:
        path.with_suffix(".bin").write_bytes(bytes(pk.blob))
    return path


_NP = {FLOAT: np.float32, UINT32: np.uint32, 5123: np.uint16, 5121: np.uint8}
_WIDTH = {"SCALAR": 1, "VEC2": 2, "VEC3": 3, "VEC4": 4}


def read_gltf(path):
    """Read a .gltf (JSON + external buffers) into ``[(node_name, [primitive dict])]``.

    Each primitive dict has ``positions``, ``indices`` (m, 3), ``texcoords``
    and ``material`` (name or None). Node translations are not applied.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    buffers = [(path.parent / b["uri"]).read_bytes() for b in doc.get("buffers", [])]

    def accessor(i):
        acc = doc["accessors"][i]
        view = doc["bufferViews"][acc["bufferView"]]
        dtype = np.dtype(_NP[acc["componentType"]]).newbyteorder("<")
        width = _WIDTH[acc["type"]]
        start = view.get("byteOffset", 0) + acc.get("byteOffset", 0)
        n = acc["count"] * width
        a = np.frombuffer(buffers[view["buffer"]], dtype=dtype, count=n, offset=start)
        return a.reshape(acc["count"], width) if width > 1 else a

    mats = doc.get("materials", [])
    out = []
    for node in doc.get("nodes", []):
        prims = []
        if "mesh" in node:
            for p in doc["meshes"][node["mesh"]]["primitives"]:
                attrs = p["attributes"]
                tc = {int(k.split("_")[1]): accessor(v) for k, v in attrs.items() if k.startswith("TEXCOORD_")}
                mat = p.get("material")
                prims.append({"positions": accessor(attrs["POSITION"]),
                              "indices": accessor(p["indices"]).astype(np.int64).reshape(-1, 3),
                              "texcoords": tc,
                              "material": None if mat is None else mats[mat].get("name")})
        out.append((node.get("name", ""), prims))
    return out


def gltf_document(path):
    return json.loads(Path(path).read_text())


def gltf_triangle_count(path):
    """Triangle count by walking every primitive's index accessor."""
    doc = gltf_document(path)
    total = 0
    for node in doc.get("nodes", []):
        if "mesh" in node:
            for p in doc["meshes"][node["mesh"]]["primitives"]:
                total += doc["accessors"][p["indices"]]["count"] // 3
    return total


def read_template_mesh(path):
    """Asset template glTF -> merged ``{vertices, triangles, uvs, groups}``; groups by material."""
    verts, tris, uvs, groups = [], [], [], []
    base = 0
    ntri = 0
    for _, prims in read_gltf(path):
        for k, p in enumerate(prims):
            n = len(p["positions"])
            verts.append(np.asarray(p["positions"], float))
            uvs.append(np.asarray(p["texcoords"].get(0, np.zeros((n, 2))), float))
            tris.append(p["indices"] + base)
            name = p["material"] or f"group{k}"
            groups.append((name, np.arange(ntri, ntri + len(p["indices"]))))
            base += n
            ntri += len(p["indices"])
    return {"vertices": np.concatenate(verts), "triangles": np.concatenate(tris),
            "uvs": np.concatenate(uvs), "groups": groups}

