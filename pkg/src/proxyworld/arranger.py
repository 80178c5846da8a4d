"""Agent-guided asset selection, prompt design and grid-based placement.

Agents see the base-world panorama with a labeled grid burned in, pick coarse
cells, then pick a sub-cell of each zoomed crop. A point sampled in the
sub-cell is back-projected onto the terrain, validated and sorted into a
distance band; midground hits become camera-facing billboards, foreground
hits instantiate alpha-card template meshes.
"""

from __future__ import annotations

import json
import logging
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import (AgentInvalidLabel, AgentUnavailable, NoHit, MaskedRegion,
                     PlacementRejected, TemplateMissing, WaterHit)
from .imageio import png_b64, read_png
from .noise import stable_rng
from .panorama import erp_uv_to_dir
from .terrain import WATER, keyword_score

log = logging.getLogger(__name__)

FOREGROUND = "foreground"
MIDGROUND = "midground"
DEFAULT_BANDS = {FOREGROUND: (2.0, 10.0), MIDGROUND: (20.0, 50.0)}
DEFAULT_COUNT = (5, 10)
DEFAULT_COARSE = (12, 6)
DEFAULT_FINE = (4, 4)
DEFAULT_MASK_FRACTION = 0.8
DEFAULT_SPACING = 1.5
DEFAULT_SIZES = {"tree": 9.0, "bush": 1.6, "rock": 1.2, "cactus": 3.0, "grass": 0.6, "flower": 0.5}
VALID = "valid"


def rejected(reason):
    return f"rejected({reason})"


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

def column_letters(i):
    """Bijective base-26: 0 -> A, 25 -> Z, 26 -> AA."""
    s = ""
    i += 1
    while i:
        i, r = divmod(i - 1, 26)
        s = string.ascii_uppercase[r] + s
    return s


@dataclass
class GridSpec:
    """``cols x rows`` cells over a ``width x height`` pixel rectangle at ``(x0, y0)``."""

    cols: int
    rows: int
    width: int
    height: int
    suitability_mask: np.ndarray | None = None  # 1 = unsuitable, full-image raster
    x0: int = 0
    y0: int = 0

    def __post_init__(self):
        if self.cols * self.rows > 676:
            raise ValueError("grid exceeds 676 labeled cells")
        if self.cols <= 0 or self.rows <= 0:
            raise ValueError("grid needs at least one cell")

    @property
    def labels(self):
        return [column_letters(c) + str(r + 1) for r in range(self.rows) for c in range(self.cols)]

    def parse(self, label):
        label = str(label).strip().upper()
        letters = label.rstrip(string.digits)
        digits = label[len(letters):]
        if not letters or not digits or not letters.isalpha():
            raise AgentInvalidLabel(f"cannot parse cell label {label!r}")
        col = 0
        for ch in letters:
            col = col * 26 + (ord(ch) - 64)
        col -= 1
        row = int(digits) - 1
        if not (0 <= col < self.cols and 0 <= row < self.rows):
            raise AgentInvalidLabel(f"cell {label!r} is outside the {self.cols}x{self.rows} grid")
        return col, row

    def bounds(self, label):
        """Pixel rectangle ``(x0, y0, x1, y1)``, half-open, in full-image coordinates."""
        col, row = self.parse(label)
        xa = self.x0 + (col * self.width) // self.cols
        xb = self.x0 + ((col + 1) * self.width) // self.cols
        ya = self.y0 + (row * self.height) // self.rows
        yb = self.y0 + ((row + 1) * self.height) // self.rows
        return xa, ya, xb, yb

    def coverage(self, label):
        if self.suitability_mask is None:
            return 0.0
        xa, ya, xb, yb = self.bounds(label)
        cell = self.suitability_mask[ya:yb, xa:xb]
        return float(cell.mean()) if cell.size else 1.0

    def excluded(self, mask_fraction=DEFAULT_MASK_FRACTION):
        return [lab for lab in self.labels if self.coverage(lab) >= mask_fraction]

    def subgrid(self, label, cols=DEFAULT_FINE[0], rows=DEFAULT_FINE[1]):
        xa, ya, xb, yb = self.bounds(label)
        return GridSpec(cols, rows, xb - xa, yb - ya, self.suitability_mask, xa, ya)


def annotate_grid(base_image, spec: GridSpec, mask_fraction=DEFAULT_MASK_FRACTION):
    """Burn grid lines and labels into the image region of ``spec``; dim excluded cells.

    Returns the annotated crop (the region covered by the grid).
    """
    img = np.asarray(base_image, float)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    crop = img[spec.y0:spec.y0 + spec.height, spec.x0:spec.x0 + spec.width, :3].copy()
    for lab in spec.excluded(mask_fraction):
        xa, ya, xb, yb = spec.bounds(lab)
        crop[ya - spec.y0:yb - spec.y0, xa - spec.x0:xb - spec.x0] *= 0.35
    pil = Image.fromarray(np.round(np.clip(crop, 0, 1) * 255).astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(pil)
    for lab in spec.labels:
        xa, ya, xb, yb = spec.bounds(lab)
        xa, xb, ya, yb = xa - spec.x0, xb - spec.x0, ya - spec.y0, yb - spec.y0
        draw.rectangle([xa, ya, xb - 1, yb - 1], outline=(255, 255, 0))
        draw.text((xa + 2, ya + 1), lab, fill=(255, 255, 255))
    return np.asarray(pil, float) / 255.0


# ---------------------------------------------------------------------------
# agents
# ---------------------------------------------------------------------------

@dataclass
class AgentReply:
    labels: list = field(default_factory=list)
    template_id: str | None = None
    prompt: str | None = None
    tracks: list = field(default_factory=list)
    transcript: str = ""


class ScriptedAgent:
    """Deterministic agent driven by a policy dict (usually loaded from JSON).

    Policy keys (all optional)::

        {"seed": 0,
         "coarse": ["F4", ...] | "auto",     # coarse picks, or seeded sampling
         "fine": {"F4": "B3", ...} | "auto",
         "count": 8,                          # coarse picks when auto
         "template": "<id>" | "auto",         # "auto" = keyword scorer
         "prompt_slots": {"season": "summer", "style": "photorealistic"},
         "ambient": [["birds", 0.8], ...] | "auto"}

    Fixed label lists are replayed in order; each re-prompt consumes the
    next ``retry`` entry if listed.
    """

    def __init__(self, policy=None, hint=None):
        self.policy = dict(policy or {})
        self.transcript = []
        self.hint = hint
        self._coarse_calls = 0
        self._retry = list(self.policy.get("retry", []))

    def observe(self, hint):
        """Give auto mode a full-image preference raster (higher = better spot).

        Stands in for what a vision model would judge from the image itself.
        """
        self.hint = None if hint is None else np.asarray(hint, float)

    def _weights(self, spec, labels):
        if self.hint is None:
            return np.ones(len(labels))
        w = []
        for lab in labels:
            xa, ya, xb, yb = spec.bounds(lab)
            cell = self.hint[ya:yb, xa:xb]
            w.append(cell.mean() if cell.size else 0.0)
        return np.asarray(w) + 1e-3

    @classmethod
    def from_file(cls, path):
        return cls(json.loads(Path(path).read_text()))

    def _rng(self, *parts):
        return stable_rng("agent", self.policy.get("seed", 0), *parts)

    def choose_cells(self, image, spec, excluded, count, stage, context=""):
        offered = [lab for lab in spec.labels if lab not in set(excluded)]
        key = "coarse" if stage == "coarse" else "fine"
        choice = self.policy.get(key, "auto")
        if stage == "retry":
            labels = [self._retry.pop(0)] if self._retry else []
            if not labels and offered:
                labels = [offered[int(self._rng("retry", context).integers(len(offered)))]]
        elif isinstance(choice, list):
            labels = list(choice)[:count]
        elif isinstance(choice, dict):
            labels = [choice[context]] if context in choice else []
            if not labels and offered:
                labels = [offered[int(self._rng(key, context).integers(len(offered)))]]
        else:
            rng = self._rng(key, context, self._coarse_calls)
            k = min(count, len(offered))
            labels = []
            if k:
                w = self._weights(spec, offered)
                picks = rng.choice(len(offered), size=k, replace=False, p=w / w.sum())
                labels = [offered[i] for i in sorted(picks)]
        if stage == "coarse":
            self._coarse_calls += 1
        self.transcript.append({"stage": stage, "context": context, "labels": labels})
        return AgentReply(labels=labels, transcript=json.dumps(labels))

    def choose_template(self, library, context_tags):
        tid = self.policy.get("template", "auto")
        if tid == "auto":
            tid = stub_select_template(library, context_tags).id
        self.transcript.append({"stage": "template", "id": tid})
        return AgentReply(template_id=tid)

    def design_prompt(self, context_tags, template):
        slots = self.policy.get("prompt_slots", {})
        return AgentReply(prompt=stub_design_prompt(context_tags, template, **slots))

    def select_ambient(self, scene_tags, clip_ids):
        choice = self.policy.get("ambient", "auto")
        if choice == "auto":
            return None
        return [(c, float(v)) for c, v in choice]


class RemoteAgent:
    """JSON-over-HTTP agent: ``POST <url>/generate`` with ``kind = agent_*``."""

    def __init__(self, url, timeout=300.0, session=None):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self._session = session

    def _ask(self, kind, payload):
        import requests

        session = self._session or requests
        body = {"kind": kind, "prompt": payload.pop("prompt", ""), "seed": 0, **payload}
        try:
            r = session.post(self.url + "/generate", json=body, timeout=self.timeout)
            r.raise_for_status()
            doc = r.json()
        except (requests.RequestException, ValueError) as exc:
            raise AgentUnavailable(str(exc)) from exc
        return AgentReply(labels=list(doc.get("labels", [])), template_id=doc.get("template_id"),
                          prompt=doc.get("prompt"), tracks=list(doc.get("tracks", [])),
                          transcript=doc.get("transcript", ""))

    def choose_cells(self, image, spec, excluded, count, stage, context=""):
        return self._ask("agent_cells", {"image": png_b64(image), "labels": spec.labels,
                                         "excluded": list(excluded), "count": count,
                                         "stage": stage, "prompt": context})

    def choose_template(self, library, context_tags):
        return self._ask("agent_template", {"templates": [t.id for t in library],
                                            "prompt": " ".join(context_tags)})

    def design_prompt(self, context_tags, template):
        return self._ask("agent_prompt", {"template": template.id, "prompt": " ".join(context_tags)})

    def select_ambient(self, scene_tags, clip_ids):
        reply = self._ask("agent_ambient", {"clips": list(clip_ids), "prompt": " ".join(scene_tags)})
        return [(c, float(v)) for c, v in reply.tracks]


def make_agent(mode="scripted", policy_path=None, url=None):
    if mode == "scripted":
        return ScriptedAgent.from_file(policy_path) if policy_path else ScriptedAgent()
    if mode == "remote":
        return RemoteAgent(url)
    raise ValueError(f"unknown agent mode {mode!r}")


# ---------------------------------------------------------------------------
# placement proposal
# ---------------------------------------------------------------------------

def _ask_cells(agent, image, spec, excluded, count, stage, context, audit):
    """One agent call plus at most one re-prompt per invalid slot."""
    reply = agent.choose_cells(image, spec, excluded, count, stage, context)
    out = []
    for lab in reply.labels[:count]:
        tries = [lab]
        ok = _valid_label(spec, lab, excluded)
        if not ok:
            again = agent.choose_cells(image, spec, excluded, 1, "retry", f"{context}:{lab}")
            if again.labels:
                tries.append(again.labels[0])
                ok = _valid_label(spec, again.labels[0], excluded)
        if ok:
            out.append(str(tries[-1]).strip().upper())
        else:
            audit.append({"stage": stage, "context": context, "rejected": tries})
            log.info("agent label(s) %s rejected at %s stage", tries, stage)
    return out


def _valid_label(spec, lab, excluded):
    try:
        spec.parse(lab)
    except AgentInvalidLabel:
        return False
    return str(lab).strip().upper() not in set(excluded)


def propose_placements(agent, base_image, spec: GridSpec, count_range=DEFAULT_COUNT,
                       fine=DEFAULT_FINE, mask_fraction=DEFAULT_MASK_FRACTION, audit=None):
    """Coarse-to-fine cell selection; returns ``[(coarse_label, fine_label, fine_bounds)]``."""
    audit = audit if audit is not None else []
    lo, hi = count_range
    excluded = spec.excluded(mask_fraction)
    coarse = _ask_cells(agent, annotate_grid(base_image, spec, mask_fraction), spec,
                        excluded, hi, "coarse", "", audit)
    out = []
    for lab in coarse:
        sub = spec.subgrid(lab, *fine)
        sub_ex = sub.excluded(mask_fraction)
        picks = _ask_cells(agent, annotate_grid(base_image, sub, mask_fraction), sub,
                           sub_ex, 1, "fine", lab, audit)
        if picks:
            out.append((lab, picks[0], sub.bounds(picks[0])))
    if len(out) < lo:
        log.warning("only %d placement proposals survived (minimum %d)", len(out), lo)
        audit.append({"warning": "shortfall", "proposals": len(out), "minimum": lo})
    return out


def sample_point(bounds, seed):
    """Uniform integer pixel inside half-open ``(x0, y0, x1, y1)``."""
    x0, y0, x1, y1 = bounds
    if x1 <= x0 or y1 <= y0:
        raise ValueError("empty cell")
    rng = np.random.default_rng(seed)
    return int(rng.integers(x0, x1)), int(rng.integers(y0, y1))


def pixel_direction(pixel, width, height):
    x, y = pixel
    uv = np.array([(x + 0.5) / width, 1.0 - (y + 0.5) / height])
    return erp_uv_to_dir(uv)


def backproject(pixel, origin, terrain, bvh, mask=None, image_size=None):
    """Nearest terrain hit through the centre of ``pixel``; returns ``(point, distance, tri)``.

    Raises NoHit, MaskedRegion or WaterHit when validation fails.
    """
    if image_size is None:
        if mask is None:
            raise ValueError("image_size or mask required")
        image_size = (mask.shape[1], mask.shape[0])
    w, h = image_size
    x, y = pixel
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"pixel {pixel} outside {w}x{h} image")
    if mask is not None and mask[y, x] >= 0.5:
        raise MaskedRegion(f"pixel {pixel} is masked as unsuitable")
    d = pixel_direction(pixel, w, h)
    hits = bvh.intersect(np.asarray(origin, float), d[None])
    if not hits.hit[0]:
        raise NoHit(f"ray through {pixel} leaves the terrain")
    tri = int(hits.tri[0])
    if terrain.region_tags is not None and terrain.region_tags[tri] == WATER:
        raise WaterHit(f"ray through {pixel} lands on water")
    t = float(hits.t[0])
    return np.asarray(origin, float) + t * d, t, tri


def classify_band(distance, bands=None):
    bands = bands or DEFAULT_BANDS
    for name in (FOREGROUND, MIDGROUND):
        lo, hi = bands[name]
        if lo <= distance <= hi:
            return name
    return rejected("OutOfBand")


@dataclass
class PlacementRecord:
    coarse_cell: str
    fine_cell: str
    fine_bounds: tuple
    pixel: tuple
    world_point: tuple | None = None
    distance: float | None = None
    band: str | None = None
    template_id: str | None = None
    asset_prompt: str = ""
    status: str = VALID
    hit_triangle: int | None = None

    @property
    def valid(self):
        return self.status == VALID

    def to_json(self):
        d = asdict(self)
        d["fine_bounds"] = list(self.fine_bounds)
        d["pixel"] = list(self.pixel)
        d["world_point"] = None if self.world_point is None else [float(v) for v in self.world_point]
        return json.dumps(d, sort_keys=True)


def arrange(proposals, origin, terrain, bvh, mask, seed=0, bands=None, spacing=DEFAULT_SPACING):
    """Sample, back-project, band-classify and space-check each proposal in order."""
    records = []
    accepted = []
    h, w = mask.shape
    for i, (coarse, fine, bounds) in enumerate(proposals):
        pixel = sample_point(bounds, seed * 1000 + i)
        rec = PlacementRecord(coarse, fine, tuple(bounds), pixel)
        try:
            point, dist, tri = backproject(pixel, origin, terrain, bvh, mask, (w, h))
        except PlacementRejected as exc:
            rec.status = rejected(exc.reason)
            records.append(rec)
            continue
        rec.world_point = tuple(float(v) for v in point)
        rec.distance = dist
        rec.hit_triangle = tri
        band = classify_band(dist, bands)
        if band not in (FOREGROUND, MIDGROUND):
            rec.status = band
        elif any(np.linalg.norm(point - p) < spacing for p in accepted):
            rec.status = rejected("Spacing")
        else:
            rec.band = band
            accepted.append(point)
        records.append(rec)
    return records


def write_audit_log(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_audit_log(path):
    out = []
    for line in Path(path).read_text().splitlines():
        d = json.loads(line)
        d["fine_bounds"] = tuple(d["fine_bounds"])
        d["pixel"] = tuple(d["pixel"])
        if d["world_point"] is not None:
            d["world_point"] = tuple(d["world_point"])
        out.append(PlacementRecord(**d))
    return out


# ---------------------------------------------------------------------------
# asset templates
# ---------------------------------------------------------------------------

@dataclass
class AssetTemplate:
    id: str
    caption: str
    category: str
    tags: tuple = ()
    mesh_path: str = ""
    material_groups: tuple = ()  # ((name, alpha_png_path), ...)
    default_size: float = 1.0

    def group_alpha(self, name, size=None):
        path = dict(self.material_groups)[name]
        a = read_png(path)[:, :, -1]
        if size is not None and a.shape != size:
            img = Image.fromarray(np.round(a * 255).astype(np.uint8), "L").resize(
                (size[1], size[0]), Image.BILINEAR)
            a = np.asarray(img, float) / 255.0
        return a


def load_asset_library(index_path):
    index_path = Path(index_path)
    doc = json.loads(index_path.read_text())
    out = []
    for e in doc["templates"]:
        groups = tuple((g["name"], str(index_path.parent / g["alpha"])) for g in e.get("material_groups", []))
        out.append(AssetTemplate(e["id"], e["caption"], e["category"], tuple(sorted(e.get("tags", []))),
                                 str(index_path.parent / e["mesh"]) if e.get("mesh") else "",
                                 groups, float(e.get("default_size", 1.0))))
    return out


def stub_select_template(library, context_tags):
    if not library:
        raise ValueError("asset library is empty")
    return min(library, key=lambda t: (-keyword_score(context_tags, set(t.tags) | {t.category}), t.id))


def select_template(agent, library, context_tags, audit=None):
    """Agent pick validated against the library; unknown ids fall back to the keyword scorer."""
    audit = audit if audit is not None else []
    by_id = {t.id: t for t in library}
    try:
        reply = agent.choose_template(library, sorted(context_tags))
        tid = reply.template_id
    except AgentUnavailable as exc:
        tid = None
        audit.append({"stage": "template", "fallback": "agent unavailable", "error": str(exc)})
    if tid in by_id:
        return by_id[tid]
    if tid is not None:
        audit.append({"stage": "template", "fallback": "unknown id", "id": tid})
        log.warning("agent chose unknown template %r; using keyword scorer", tid)
    return stub_select_template(library, context_tags)


def stub_design_prompt(context_tags, template, season="summer", style="photorealistic"):
    parts = [template.category, template.caption]
    if context_tags:
        parts.append(", ".join(sorted(context_tags)))
    parts += [f"{season} season", f"{style} style"]
    return ", ".join(parts)


def design_prompt(agent, context_tags, template):
    try:
        reply = agent.design_prompt(sorted(context_tags), template)
        if reply.prompt:
            return reply.prompt
    except AgentUnavailable:
        log.warning("prompt designer unavailable; using template prompt")
    return stub_design_prompt(context_tags, template)


# ---------------------------------------------------------------------------
# proxies
# ---------------------------------------------------------------------------

@dataclass
class ProxyAsset:
    kind: str  # "billboard" | "alpha_card_template"
    vertices: np.ndarray
    triangles: np.ndarray
    uvs: np.ndarray
    anchor: tuple
    yaw: float
    size: tuple  # (height, width) meters
    groups: list = field(default_factory=list)  # [(name, triangle index array)]
    textures: dict = field(default_factory=dict)  # group name -> RgbaTexture
    template_id: str | None = None
    record_index: int | None = None

    @property
    def n_triangles(self):
        return len(self.triangles)

    def normal(self):
        """Front-face normal of the first triangle."""
        v = self.vertices[self.triangles[0]]
        n = np.cross(v[1] - v[0], v[2] - v[0])
        return n / np.linalg.norm(n)


def facing_yaw(anchor, origin):
    """Yaw (radians about +y) turning a +z-facing card toward ``origin`` horizontally."""
    d = np.asarray(origin, float) - np.asarray(anchor, float)
    return float(np.arctan2(d[0], d[2]))


def billboard_quad(anchor, origin, height, width):
    """Vertical quad with its bottom edge centred on ``anchor``, front face toward ``origin``."""
    yaw = facing_yaw(anchor, origin)
    fwd = np.array([np.sin(yaw), 0.0, np.cos(yaw)])
    right = np.array([fwd[2], 0.0, -fwd[0]])
    a = np.asarray(anchor, float)
    hw = width / 2.0
    up = np.array([0.0, height, 0.0])
    verts = np.stack([a - hw * right, a + hw * right, a + hw * right + up, a - hw * right + up])
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    # glTF texture space: v = 0 at the top row
    uvs = np.array([[0.0, 1.0], [1.0, 1.0], [1.0, 0.0], [0.0, 0.0]])
    return verts, tris, uvs, yaw


def instantiate_proxy(record: PlacementRecord, texture, origin, template=None, template_mesh=None,
                      size_table=None, group_textures=None):
    """Build the proxy for a valid record.

    Midground: billboard sized from the category table, width from the
    texture aspect. Foreground: the template mesh translated to the anchor,
    one RGBA texture per material group.
    """
    if not record.valid:
        raise ValueError("cannot instantiate a rejected placement")
    size_table = size_table or DEFAULT_SIZES
    anchor = np.asarray(record.world_point, float)
    if record.band == MIDGROUND:
        category = template.category if template is not None else "tree"
        height = size_table.get(category, template.default_size if template else 1.0)
        width = height * texture.width / texture.height
        verts, tris, uvs, yaw = billboard_quad(anchor, origin, height, width)
        return ProxyAsset("billboard", verts, tris, uvs, tuple(anchor), yaw, (height, width),
                          [("card", np.arange(2))], {"card": texture},
                          template.id if template else None)
    if template is None or template_mesh is None:
        raise TemplateMissing("foreground placement needs a template mesh")
    verts = np.asarray(template_mesh["vertices"], float) + anchor
    tris = np.asarray(template_mesh["triangles"], np.int64)
    groups = [(name, np.asarray(idx, np.int64)) for name, idx in template_mesh["groups"]]
    textures = dict(group_textures or {})
    for name, _ in groups:
        textures.setdefault(name, texture)
    ext = verts.max(axis=0) - verts.min(axis=0)
    return ProxyAsset("alpha_card_template", verts, tris, np.asarray(template_mesh["uvs"], float),
                      tuple(anchor), 0.0, (float(ext[1]), float(max(ext[0], ext[2]))),
                      groups, textures, template.id)
