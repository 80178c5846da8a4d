"""Deterministic fixture libraries for offline runs and tests.

:func:`build_fixtures` writes a terrain template library (heightfield OBJ
meshes with ground/water groups), a 16-entry depth reference library in the
estimated-depth style, an alpha-card asset template library, an audio clip
library, a scripted agent policy and a ready-to-run scene config.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import yaml

from . import depthadapt
from .immersion import AudioClip, write_wav
from .imageio import write_png
from .meshio import GltfMaterial, GltfNode, GltfPrimitive, write_gltf, write_obj
from .noise import periodic_noise, stable_rng
from .panorama import SKY_DEPTH, pixel_dirs

TERRAIN_HALF_EXTENT = 120.0
TERRAIN_CELLS = 100
WATER_LEVEL = -0.6

TERRAINS = {
    "alpine_lake": ("Alpine valley with a calm lake ringed by pine-covered mountains",
                    ["alpine", "forest", "lake", "mountain", "pine", "valley"], True),
    "canyon_river": ("Red rock canyon with a shallow river bed",
                     ["canyon", "desert", "river", "rock"], True),
    "coastal_cliffs": ("Grassy coastal cliffs above a rocky shore",
                       ["cliffs", "coast", "grass", "rock", "sea"], True),
    "desert_dunes": ("Wide sand dunes under a bright sky",
                     ["cactus", "desert", "dunes", "sand"], False),
    "rolling_meadow": ("Rolling green meadow hills with scattered trees",
                       ["flowers", "grass", "hills", "meadow", "oak"], False),
}

ASSETS = {
    "pine": ("tall evergreen pine tree", "tree", ["alpine", "forest", "mountain", "pine"], 9.0),
    "oak": ("broad leafy oak tree", "tree", ["hills", "meadow", "oak", "park"], 8.0),
    "cactus": ("saguaro cactus with two arms", "cactus", ["cactus", "desert", "sand"], 3.0),
    "shrub": ("round green shrub", "bush", ["forest", "grass", "meadow", "shrub"], 1.6),
    "boulder": ("mossy granite boulder", "rock", ["cliffs", "mountain", "rock", "river"], 1.2),
    "reeds": ("clump of lakeside reeds", "grass", ["lake", "reeds", "river", "water"], 0.9),
}

AUDIO = {
    "birds": ["birds", "forest", "meadow", "morning"],
    "wind": ["cliffs", "desert", "mountain", "wind"],
    "water": ["lake", "river", "stream", "water"],
    "waves": ["coast", "sea", "waves"],
    "traffic": ["city", "street", "traffic"],
}


# ---------------------------------------------------------------------------
# terrain
# ---------------------------------------------------------------------------

def grid_axis(cells=TERRAIN_CELLS, half=TERRAIN_HALF_EXTENT, density=4.0):
    """Vertex coordinates along one axis; sinh spacing puts fine cells near the centre."""
    s = np.linspace(-1.0, 1.0, cells + 1)
    return half * np.sinh(density * s) / np.sinh(density)


def heightfield(name, x, z):
    rng = stable_rng("terrain", name)
    r = np.hypot(x, z)
    theta = np.arctan2(z, x)
    n = periodic_noise(rng, 64, 64, 8, 8)
    # large-scale wobble read off the periodic noise by polar angle
    col = ((theta + np.pi) / (2 * np.pi) * 63).astype(int)
    wob = n[16, col] - 0.5
    if name == "alpine_lake":
        lake = -2.0 * np.exp(-(((x - 30) / 14) ** 2 + ((z + 12) / 10) ** 2))
        ring = 40.0 * np.clip((r - 60) / 60, 0, 1) ** 1.6 * (1 + 0.6 * wob)
        return lake + ring + 0.5 * np.sin(x / 9) * np.cos(z / 11)
    if name == "canyon_river":
        walls = 35.0 * np.clip((np.abs(z + 5 * np.sin(x / 25)) - 18) / 30, 0, 1) ** 1.2
        river = -1.5 * np.exp(-((z + 5 * np.sin(x / 25) - 10) / 3) ** 2)
        return walls + river + 2.0 * wob * np.clip(r / 60, 0, 1)
    if name == "coastal_cliffs":
        sea = np.where(x > 50, -3.0, 0.0) * np.clip((x - 50) / 10, 0, 1)
        hills = 12.0 * np.clip((-x - 30) / 80, 0, 1) * (1 + wob)
        return sea + hills + 0.4 * np.sin(z / 7)
    if name == "desert_dunes":
        return 3.0 * np.sin(x / 13 + 0.7 * np.sin(z / 17)) * np.clip(r / 30, 0, 1) + 6 * wob * np.clip(r / 90, 0, 1)
    return 4.0 * np.sin(x / 23) * np.cos(z / 19) * np.clip(r / 25, 0, 1) + 8 * np.clip((r - 70) / 50, 0, 1)


def terrain_mesh(name, cells=TERRAIN_CELLS):
    """Heightfield grid mesh; returns ``(vertices, triangles, water_flags)``."""
    a = grid_axis(cells)
    xx, zz = np.meshgrid(a, a)
    yy = heightfield(name, xx, zz)
    yy = yy - heightfield(name, np.zeros(1), np.zeros(1))[0]
    verts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    n = cells + 1
    i, j = np.meshgrid(np.arange(cells), np.arange(cells), indexing="ij")
    v00 = (i * n + j).ravel()
    v01, v10, v11 = v00 + 1, v00 + n, v00 + n + 1
    # counter-clockwise seen from above (+y)
    tris = np.concatenate([np.stack([v00, v10, v01], 1), np.stack([v01, v10, v11], 1)])
    cen = verts[tris].mean(axis=1)
    water = cen[:, 1] < WATER_LEVEL
    return verts, tris, water


def write_terrain_library(root):
    root = Path(root)
    (root / "meshes").mkdir(parents=True, exist_ok=True)
    entries = []
    for tid, (caption, tags, has_water) in sorted(TERRAINS.items()):
        v, t, water = terrain_mesh(tid)
        if not has_water:
            water[:] = False
        groups = [("ground", np.flatnonzero(~water))]
        if water.any():
            groups.append(("water", np.flatnonzero(water)))
        write_obj(root / "meshes" / f"{tid}.obj", v, t, groups=groups)
        entries.append({"id": tid, "mesh": f"meshes/{tid}.obj", "caption": caption,
                        "tags": tags, "water": bool(water.any())})
    (root / "index.json").write_text(json.dumps({"templates": entries}, indent=1, sort_keys=True))
    return root / "index.json"


# ---------------------------------------------------------------------------
# depth references
# ---------------------------------------------------------------------------

def analytic_depth(width, eye, tilt=0.0, bowl=0.0):
    """Depth of a tilted, optionally bowl-shaped ground seen from height ``eye``."""
    d = pixel_dirs(width, width // 2).reshape(-1, 3)
    # ground y = tilt * x + bowl * (x^2 + z^2) solved along each ray by fixed-point steps
    t = np.full(len(d), np.inf)
    down = d[:, 1] < -1e-3
    slope = d[:, 1] - tilt * d[:, 0]
    ok = slope < -1e-3
    t[ok] = eye / -slope[ok]
    with np.errstate(invalid="ignore", divide="ignore"):
        for _ in range(6):
            p = np.where(np.isfinite(t), t, 0.0)[:, None] * d
            t_new = (eye + bowl * (p[:, 0] ** 2 + p[:, 2] ** 2)) / -slope
            t = np.where(ok & np.isfinite(t_new) & (t_new > 0), t_new, np.inf)
    t[~(ok & down) | (t > 400)] = SKY_DEPTH
    return t.reshape(width // 2, width)


def reference_thumbs(n=16):
    rng = stable_rng("depth-refs")
    out = []
    for k in range(n):
        eye = 1.2 + 0.15 * k
        tilt = 0.08 * np.sin(k)
        bowl = 0.002 * (k % 4)
        d = analytic_depth(128, eye, tilt, bowl)
        a, b = 6.0 + 0.5 * k, 1.5 + 0.1 * k
        est = depthadapt.estimated_style(d, a, b, noise=0.002, rng=rng)
        est = np.where(d >= SKY_DEPTH * 0.5, SKY_DEPTH, est)
        thumb = depthadapt.thumbnail(est, id=f"ref{k:02d}", source=f"synthetic eye={eye:.2f}")
        out.append(thumb)
    return out


# ---------------------------------------------------------------------------
# assets
# ---------------------------------------------------------------------------

def card_alpha(category, part, w=64, h=128):
    yy, xx = np.mgrid[0:h, 0:w]
    x = (xx + 0.5) / w - 0.5
    y = (yy + 0.5) / h
    if part == "trunk":
        shape = (np.abs(x) < 0.06 + 0.03 * y) & (y > 0.55)
    elif category == "tree":
        shape = (np.abs(x) < 0.45 * (y - 0.02) / 0.7) & (y > 0.02) & (y < 0.72)
    elif category == "cactus":
        stem = (np.abs(x) < 0.1) & (y > 0.05)
        arms = ((np.abs(np.abs(x) - 0.25) < 0.06) & (y > 0.25) & (y < 0.55)) | \
               ((np.abs(x) < 0.3) & (np.abs(y - 0.55) < 0.05))
        shape = stem | arms
    elif category == "grass":
        shape = (np.abs(np.sin(x * 40)) * (1 - y) < 0.5) & (y > 0.2 + 0.5 * np.abs(x))
    else:
        shape = ((x / 0.45) ** 2 + ((y - 0.6) / 0.4) ** 2) < 1.0
    return np.concatenate([np.ones((h, w, 3)) * 0.5, shape[:, :, None].astype(float)], axis=2)


def crossed_cards(height, width, parts):
    """Two perpendicular vertical quads per part, base at the origin."""
    prims = []
    for name, (h0, h1, w) in parts:
        verts, uvs, tris = [], [], []
        for axis in (0, 2):
            b = len(verts)
            for sx, sy, u, v in ((-1, h0, 0, 1), (1, h0, 1, 1), (1, h1, 1, 0), (-1, h1, 0, 0)):
                p = [0.0, sy * height, 0.0]
                p[axis] = sx * w * width / 2
                verts.append(p)
                uvs.append([u, v])
            tris += [[b, b + 1, b + 2], [b, b + 2, b + 3]]
        prims.append((name, np.array(verts), np.array(tris), np.array(uvs, float)))
    return prims


def write_asset_library(root):
    root = Path(root)
    (root / "templates").mkdir(parents=True, exist_ok=True)
    entries = []
    for aid, (caption, category, tags, size) in sorted(ASSETS.items()):
        if category == "tree":
            parts = [("foliage", (0.25, 1.0, 1.0)), ("trunk", (0.0, 0.45, 0.25))]
        else:
            parts = [("body", (0.0, 1.0, 1.0))]
        prims = crossed_cards(size, size * 0.6, parts)
        mats, gprims, groups = [], [], []
        for k, (name, v, t, uv) in enumerate(prims):
            alpha_rel = f"templates/{aid}_{name}.png"
            write_png(root / alpha_rel, card_alpha(category, name))
            mats.append(GltfMaterial(name, f"{aid}_{name}.png", "BLEND", double_sided=True))
            gprims.append(GltfPrimitive(v, t, k, {0: uv}))
            groups.append({"name": name, "alpha": alpha_rel})
        write_gltf(root / "templates" / f"{aid}.gltf", [GltfNode(aid, gprims)], mats)
        entries.append({"id": aid, "caption": caption, "category": category, "tags": tags,
                        "mesh": f"templates/{aid}.gltf", "material_groups": groups,
                        "default_size": size})
    (root / "index.json").write_text(json.dumps({"templates": entries}, indent=1, sort_keys=True))
    return root / "index.json"


# ---------------------------------------------------------------------------
# audio
# ---------------------------------------------------------------------------

def synth_clip(kind, seconds=3.0, rate=44100):
    rng = stable_rng("audio", kind)
    t = np.arange(int(seconds * rate)) / rate
    noise = rng.standard_normal(len(t))
    if kind == "birds":
        chirp = np.sin(2 * np.pi * (2500 + 800 * np.sin(2 * np.pi * 6 * t)) * t)
        s = chirp * (np.sin(2 * np.pi * 1.3 * t) > 0.6) * 0.4 + 0.02 * noise
    elif kind == "traffic":
        s = 0.3 * np.sin(2 * np.pi * 90 * t) + 0.1 * noise
    else:
        k = {"wind": 400, "water": 40, "waves": 200}[kind]
        smooth = np.convolve(noise, np.ones(k) / np.sqrt(k), mode="same")
        env = 0.6 + 0.4 * np.sin(2 * np.pi * (0.2 if kind == "waves" else 0.5) * t)
        s = 0.25 * smooth * env
    return np.clip(s, -1.0, 1.0)


def write_audio_library(root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for cid, tags in sorted(AUDIO.items()):
        write_wav(root / f"{cid}.wav", AudioClip(44100, synth_clip(cid), tuple(tags), cid))
        entries.append({"id": cid, "file": f"{cid}.wav", "tags": tags})
    (root / "index.json").write_text(json.dumps({"clips": entries}, indent=1, sort_keys=True))
    return root / "index.json"


# ---------------------------------------------------------------------------
# everything
# ---------------------------------------------------------------------------

DEFAULT_POLICY = {"seed": 0, "coarse": "auto", "fine": "auto", "count": 10,
                  "template": "auto", "ambient": "auto",
                  "prompt_slots": {"season": "summer", "style": "photorealistic"}}


def scene_config(prompt="an alpine lake surrounded by pine forest and mountains", seed=0, **over):
    cfg = {
        "user_prompt": prompt,
        "seed": seed,
        "libraries": {"terrain": "terrain/index.json", "depth": "depth_refs",
                      "assets": "assets/index.json", "audio": "audio/index.json"},
        "backend": {"mode": "stub"},
        "agent": {"mode": "scripted", "policy": "agent_policy.json"},
        "output": "out",
    }
    cfg.update(over)
    return cfg


def build_fixtures(root, prompt=None, seed=0):
    """Write every fixture library plus ``scene.yaml`` under ``root``; returns the config path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_terrain_library(root / "terrain")
    depthadapt.save_library(root / "depth_refs", reference_thumbs())
    write_asset_library(root / "assets")
    write_audio_library(root / "audio")
    (root / "agent_policy.json").write_text(json.dumps(DEFAULT_POLICY, indent=1, sort_keys=True))
    cfg = scene_config(prompt, seed) if prompt else scene_config(seed=seed)
    path = root / "scene.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=False))
    return path
