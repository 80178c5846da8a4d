"""Scene configuration: YAML file -> validated, defaulted :class:`SceneConfig`."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigInvalid

DEFAULTS = {
    "user_prompt": "",
    "prompt_template": "{prompt}, panoramic landscape, highly detailed",
    "scene_tags": None,  # derived from the prompt when absent
    "seed": 0,
    "libraries": {"terrain": None, "depth": None, "assets": None, "audio": None},
    "backend": {"mode": "stub", "url": None, "timeout": 300.0},
    "agent": {"mode": "scripted", "policy": None, "url": None},
    "resolution": {"depth": 512, "matte_tile": 256, "matte_overlap": 32, "bottom": 128,
                   "shadow": 512, "asset": 128, "effects": 128, "cubemap": 128},
    "bands": {"foreground": [2.0, 10.0], "midground": [20.0, 50.0]},
    "placement": {"count": [5, 10], "coarse_grid": [12, 6], "fine_grid": [4, 4],
                  "mask_fraction": 0.8, "spacing": 1.5},
    "budget": {"triangles": 250000},
    "terrain": {"eye_height": 1.7, "pitch_threshold": 55.0, "highpass_radius": 4,
                "displacement_scale": 0.05, "trimap_dilate": 3, "trimap_erode": 3},
    "lighting": {"sun_dir": [-0.4, -0.8, -0.45], "s_min": 0.4},
    "immersion": {"fade": 0.5, "rain": None, "rain_density": 2.0, "cloud_seed": None},
    "output": "out",
}

STOPWORDS = {"a", "an", "and", "the", "of", "with", "in", "on", "by", "at", "to", "for",
             "surrounded", "under", "over", "near", "some", "its"}


@dataclass
class SceneConfig:
    data: dict
    path: Path | None = None

    def __getattr__(self, name):
        try:
            return self.__dict__["data"][name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def tags(self):
        if self.data.get("scene_tags"):
            return sorted({str(t).lower() for t in self.data["scene_tags"]})
        return prompt_keywords(self.data["user_prompt"])

    @property
    def global_prompt(self):
        return self.data["prompt_template"].format(prompt=self.data["user_prompt"])

    def canonical(self):
        """Config as canonical JSON, without the output location."""
        d = copy.deepcopy(self.data)
        d.pop("output", None)
        return json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)

    def digest(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def prompt_keywords(prompt):
    words = [w.strip(",.;:!?").lower() for w in str(prompt).split()]
    out = set()
    for w in words:
        if w and w not in STOPWORDS and w.isalpha():
            out.add(w)
            if w.endswith("s") and len(w) > 3:
                out.add(w[:-1])
    return sorted(out)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _pair(problems, name, value, kind=float):
    try:
        lo, hi = (kind(x) for x in value)
    except (TypeError, ValueError):
        problems.append(f"{name}: expected a [min, max] pair, got {value!r}")
        return None
    if not lo <= hi:
        problems.append(f"{name}: min {lo} exceeds max {hi}")
        return None
    return lo, hi


def load_config(source, base_dir=None):
    """Parse a YAML path or a dict, fill defaults and validate."""
    if isinstance(source, dict):
        raw, path = source, None
    else:
        path = Path(source)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigInvalid([f"cannot read config: {exc}"]) from exc
        base_dir = base_dir or path.parent
    if not isinstance(raw, dict):
        raise ConfigInvalid(["config root must be a mapping"])
    base_dir = Path(base_dir or ".")
    unknown = sorted(set(raw) - set(DEFAULTS))
    data = _merge(DEFAULTS, raw)
    problems = [f"{k}: unknown field" for k in unknown]

    if not str(data["user_prompt"]).strip():
        problems.append("user_prompt: must be non-empty")
    try:
        data["seed"] = int(data["seed"])
    except (TypeError, ValueError):
        problems.append(f"seed: not an integer ({data['seed']!r})")

    libs = data["libraries"]
    for key in ("terrain", "depth", "assets", "audio"):
        p = libs.get(key)
        if not p:
            problems.append(f"libraries.{key}: missing")
            continue
        full = (base_dir / p).resolve()
        if not full.exists():
            problems.append(f"libraries.{key}: path does not exist ({full})")
        libs[key] = str(full)

    be = data["backend"]
    if be["mode"] not in ("stub", "remote"):
        problems.append(f"backend.mode: must be stub or remote, got {be['mode']!r}")
    ag = data["agent"]
    if ag["mode"] not in ("scripted", "remote"):
        problems.append(f"agent.mode: must be scripted or remote, got {ag['mode']!r}")
    if ag["mode"] == "scripted" and ag.get("policy"):
        full = (base_dir / ag["policy"]).resolve()
        if not full.exists():
            problems.append(f"agent.policy: path does not exist ({full})")
        ag["policy"] = str(full)
    if ag["mode"] == "remote" and not ag.get("url"):
        problems.append("agent.url: required for remote agents")

    res = data["resolution"]
    for k, v in res.items():
        if not isinstance(v, int) or v <= 0:
            problems.append(f"resolution.{k}: must be a positive integer")
    if isinstance(res.get("depth"), int) and res["depth"] % 2:
        problems.append("resolution.depth: panorama width must be even")
    if isinstance(res.get("effects"), int) and res["effects"] & (res["effects"] - 1):
        problems.append("resolution.effects: must be a power of two")
    if res.get("effects", 64) < 64:
        problems.append("resolution.effects: must be at least 64")

    fg = _pair(problems, "bands.foreground", data["bands"]["foreground"])
    mg = _pair(problems, "bands.midground", data["bands"]["midground"])
    if fg and mg:
        if fg[0] <= 0:
            problems.append("bands.foreground: distances must be positive")
        if not fg[1] < mg[0]:
            problems.append("bands: foreground and midground overlap or are out of order")
        data["bands"] = {"foreground": list(fg), "midground": list(mg)}

    pl = data["placement"]
    cnt = _pair(problems, "placement.count", pl["count"], int)
    if cnt:
        if cnt[0] < 0:
            problems.append("placement.count: must be non-negative")
        pl["count"] = list(cnt)
    for g in ("coarse_grid", "fine_grid"):
        try:
            c, r = (int(x) for x in pl[g])
            if c <= 0 or r <= 0 or c * r > 676:
                problems.append(f"placement.{g}: needs 1..676 cells")
            pl[g] = [c, r]
        except (TypeError, ValueError):
            problems.append(f"placement.{g}: expected [cols, rows]")
    if not 0 < float(pl["mask_fraction"]) <= 1:
        problems.append("placement.mask_fraction: must be in (0, 1]")

    if int(data["budget"]["triangles"]) <= 0:
        problems.append("budget.triangles: must be positive")
    sun = data["lighting"]["sun_dir"]
    if len(sun) != 3 or sum(float(x) ** 2 for x in sun) < 1e-12:
        problems.append("lighting.sun_dir: must be a non-zero 3-vector")
    if not 0 <= float(data["lighting"]["s_min"]) <= 1:
        problems.append("lighting.s_min: must be in [0, 1]")
    if float(data["immersion"]["fade"]) < 0:
        problems.append("immersion.fade: must be non-negative")

    if problems:
        raise ConfigInvalid(problems)
    out = data["output"]
    data["output"] = str((base_dir / out).resolve())
    return SceneConfig(data, path)


def validate_config(path):
    return load_config(path)
