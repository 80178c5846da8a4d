"""Config-driven pipeline: thirteen cached stages from terrain retrieval to export.

Each stage reads the context produced by its predecessors and returns a dict
of new entries. Outputs are pickled to ``<out>/.cache`` under a hash chained
from the config digest, the library contents and the previous stage's output,
so a cache hit implies bit-identical inputs. Nothing written to the output
directory depends on wall-clock time, hash randomization or set ordering.
"""

from __future__ import annotations

import hashlib
import json
import logging
import pickle
import time
from pathlib import Path

import numpy as np

from . import arranger, depthadapt, export, genbridge, immersion, terrain
from .config import SceneConfig, load_config
from .errors import ProxyWorldError, StageFailed
from .imageio import write_png, write_raw
from .meshio import read_obj, read_template_mesh
from .panorama import ErpImage, render_erp_depth

log = logging.getLogger(__name__)

STAGES = ("terrain", "depth", "adapt", "panorama", "sky", "matte", "terrain_uv",
          "arrange", "assets", "immersion", "shadow", "assemble", "export")
PICKLE_PROTOCOL = 4


def library_digest(path, exclude=None):
    """Content hash of a library (relative names + bytes, sorted).

    An index file stands for its whole directory. Files under ``exclude``
    (the output directory, when it sits inside a library) are skipped.
    """
    p = Path(path)
    root = p.parent if p.is_file() else p
    skip = Path(exclude).resolve() if exclude else None
    h = hashlib.sha256()
    for f in sorted(x for x in root.rglob("*") if x.is_file()):
        if skip is not None and f.resolve().is_relative_to(skip):
            continue
        h.update(str(f.relative_to(root)).encode())
        h.update(hashlib.sha256(f.read_bytes()).digest())
    return h.hexdigest()


class Pipeline:
    """One scene build; ``backend`` and ``agent`` default from the config."""

    def __init__(self, config, backend=None, agent=None, out_dir=None):
        self.cfg = config if isinstance(config, SceneConfig) else load_config(config)
        self.out = Path(out_dir or self.cfg.output)
        self.cache_dir = self.out / ".cache"
        c = self.cfg.data
        self.backend = backend or genbridge.make_backend(c["backend"]["mode"], c["backend"]["url"],
                                                         c["backend"]["timeout"])
        self.agent = agent or arranger.make_agent(c["agent"]["mode"], c["agent"]["policy"],
                                                  c["agent"]["url"])
        self.ctx = {}
        self.events = []
        self.timings = {}

    # -- hashing / cache ---------------------------------------------------

    def root_hash(self):
        c = self.cfg.data
        libs = {k: library_digest(v, self.out) for k, v in sorted(c["libraries"].items())}
        policy = c["agent"].get("policy")
        if policy:
            libs["policy"] = hashlib.sha256(Path(policy).read_bytes()).hexdigest()
        cfg = json.loads(self.cfg.canonical())
        cfg["libraries"] = libs
        cfg["agent"].pop("policy", None)
        return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()

    def _cache_file(self, i):
        return self.cache_dir / f"{i + 1:02d}_{STAGES[i]}.pkl"

    def _load(self, i, input_hash):
        f = self._cache_file(i)
        if not f.exists():
            return None
        blob = f.read_bytes()
        try:
            rec = pickle.loads(blob)
        except (pickle.UnpicklingError, EOFError, AttributeError, ImportError):
            log.warning("discarding unreadable cache file %s", f)
            return None
        if not isinstance(rec, dict) or rec.get("input_hash") != input_hash:
            return None
        return rec["output"], hashlib.sha256(blob).hexdigest()

    def _store(self, i, input_hash, output):
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        blob = pickle.dumps({"stage": STAGES[i], "input_hash": input_hash, "output": output},
                            protocol=PICKLE_PROTOCOL)
        # write then rename, so a killed run never leaves a truncated cache file
        tmp = self._cache_file(i).with_suffix(".tmp")
        tmp.write_bytes(blob)
        tmp.replace(self._cache_file(i))
        return hashlib.sha256(blob).hexdigest()

    # -- driver ------------------------------------------------------------

    def run(self, until=None, only=None):
        """Run stages ``1..until`` (1-based); ``only=N`` recomputes stage N from cached predecessors."""
        self.out.mkdir(parents=True, exist_ok=True)
        last = len(STAGES) if until is None else int(until)
        if only is not None:
            last = int(only)
        if not 1 <= last <= len(STAGES):
            raise ValueError(f"stage must be in 1..{len(STAGES)}")
        h = self.root_hash()
        self.events = []
        for i in range(last):
            name = STAGES[i]
            input_hash = hashlib.sha256(f"{h}:{name}".encode()).hexdigest()
            force = only is not None and i == last - 1
            cached = None if force else self._load(i, input_hash)
            if only is not None and i < last - 1 and cached is None:
                raise StageFailed(name, RuntimeError("predecessor not cached; run the earlier stages first"))
            t0 = time.perf_counter()
            if cached is not None:
                output, out_hash = cached
                status = "hit"
                self.ctx.update(output)
                # stages that write files re-emit them from cached state
                self._emit(name)
            else:
                try:
                    output = getattr(self, "stage_" + name)()
                except ProxyWorldError as exc:
                    raise StageFailed(name, exc) from exc
                self.ctx.update(output)
                out_hash = self._store(i, input_hash, output)
                self._emit(name)
                status = "miss"
            dt = time.perf_counter() - t0
            self.timings[name] = dt
            log.info("stage %2d %-11s %s %.2fs", i + 1, name, status, dt)
            self.events.append({"stage": i + 1, "name": name, "cache": status,
                                "input_hash": input_hash, "output_hash": out_hash})
            h = out_hash
        (self.out / "stages.jsonl").write_text("".join(json.dumps(e, sort_keys=True) + "\n"
                                                       for e in self.events))
        return self.out

    def _emit(self, name):
        fn = getattr(self, "emit_" + name, None)
        if fn is not None:
            fn()

    # -- helpers -----------------------------------------------------------

    @property
    def c(self):
        return self.cfg.data

    def _seed(self, *parts):
        return int(hashlib.sha256(":".join(map(str, (self.c["seed"], *parts))).encode()).hexdigest()[:8], 16)

    def _bvh(self, key="mesh"):
        cache = self.__dict__.setdefault("_bvhs", {})
        mesh = self.ctx[key]
        ident = (key, id(mesh))
        if ident not in cache:
            cache[ident] = mesh.bvh()
        return cache[ident]

    # -- stages ------------------------------------------------------------

    def stage_terrain(self):
        lib = terrain.load_template_library(self.c["libraries"]["terrain"])
        tpl = terrain.retrieve_template(lib, self.cfg.tags)
        obj = read_obj(tpl.mesh_path)
        tags = np.full(len(obj.triangles), terrain.GROUND, dtype="<U6")
        for name, idx in obj.groups:
            if name == terrain.WATER:
                tags[idx] = terrain.WATER
        mesh = terrain.TerrainMesh(obj.vertices, obj.triangles, region_tags=tags).validate()
        origin = terrain.default_origin(mesh, self.c["terrain"]["eye_height"])
        return {"template": tpl, "base_mesh": mesh, "origin": origin}

    def stage_depth(self):
        mesh = self.ctx["base_mesh"]
        return {"depth": render_erp_depth(mesh, self.ctx["origin"], self.c["resolution"]["depth"],
                                          bvh=self._bvh("base_mesh"))}

    def stage_adapt(self):
        lib = depthadapt.load_library(self.c["libraries"]["depth"])
        adapted, poly, ref = depthadapt.adapt_depth(self.ctx["depth"], lib)
        return {"adapted": adapted, "remap": poly, "reference_id": ref.id}

    def emit_adapt(self):
        fit = dict(self.ctx["remap"].to_dict(), reference=self.ctx["reference_id"])
        (self.out / "depth_fit.json").write_text(json.dumps(fit, indent=1, sort_keys=True) + "\n")

    def stage_panorama(self):
        mesh = self.ctx["base_mesh"]
        regions = []
        if (mesh.region_tags == terrain.WATER).any():
            water = terrain.render_mask(mesh, self.ctx["origin"], self.c["resolution"]["depth"],
                                        "water", bvh=self._bvh("base_mesh"))
            regions.append((water.plane(), "calm reflective water"))
        pano = genbridge.generate_base_panorama(self.backend, self.ctx["adapted"], self.cfg.global_prompt,
                                                regions, self._seed("panorama"))
        return {"pano": pano}

    def stage_sky(self):
        mesh = self.ctx["base_mesh"]
        w = self.ctx["pano"].width
        mask = terrain.render_mask(mesh, self.ctx["origin"], w, "terrain", bvh=self._bvh("base_mesh"))
        sky = genbridge.outpaint_sky(self.backend, self.ctx["pano"], mask, "clear sky, " + self.c["user_prompt"],
                                     self._seed("sky"))
        return {"terrain_mask": mask, "sky": sky}

    def stage_matte(self):
        t = self.c["terrain"]
        tri = genbridge.build_trimap(self.ctx["terrain_mask"], t["trimap_dilate"], t["trimap_erode"])
        r = self.c["resolution"]
        tile = min(r["matte_tile"] * 2, self.ctx["pano"].width)
        overlap = min(r["matte_overlap"] * 2, tile - 1)
        matte = genbridge.matte_terrain(self.backend, self.ctx["pano"], tri, tile, overlap, self._seed("matte"))
        return {"matte": matte}

    def stage_terrain_uv(self):
        t = self.c["terrain"]
        origin = self.ctx["origin"]
        mesh = terrain.assign_panoramic_uv(self.ctx["base_mesh"], origin)
        mesh = terrain.partition_bottom(mesh, origin, t["pitch_threshold"])
        bottom = None
        if mesh.bottom_flag.any():
            res = self.c["resolution"]["bottom"]
            bvh = self._bvh("base_mesh")
            reproj, _ = terrain.render_bottom_map(self.ctx["pano"], mesh, origin, res, bvh)
            inside = terrain.bottom_region_mask(mesh, origin, res, t["pitch_threshold"], bvh)
            refined = genbridge.repaint(self.backend, reproj, inside.astype(float),
                                        "ground texture, top-down, " + self.c["user_prompt"],
                                        self._seed("bottom"))
            bottom = terrain.feather_bottom_map(refined, reproj, inside)
            height = bottom.mean(axis=2)
            mesh = terrain.apply_displacement(mesh, height, t["highpass_radius"], t["displacement_scale"])
        mesh = terrain.fix_seam_uvs(mesh)
        return {"mesh": mesh, "bottom_texture": bottom}

    def _suitability(self):
        mesh = self.ctx["mesh"]
        w = self.ctx["pano"].width
        water = terrain.render_mask(mesh, self.ctx["origin"], w, "water", bvh=self._bvh("mesh")).plane()
        sky = 1.0 - self.ctx["terrain_mask"].plane()
        return np.maximum(water, sky)

    def stage_arrange(self):
        pl, bands = self.c["placement"], self.c["bands"]
        pano = self.ctx["pano"]
        h, w = pano.height, pano.width
        mask = self._suitability()
        spec = arranger.GridSpec(pl["coarse_grid"][0], pl["coarse_grid"][1], w, h, mask)
        if hasattr(self.agent, "observe"):
            depth = genbridge._resize_nearest(self.ctx["depth"].plane(), h, w)
            fg, mg = bands["foreground"], bands["midground"]
            # the thin distant band gets more weight so layouts mix both distance classes
            pref = 0.5 * ((depth >= fg[0]) & (depth <= fg[1])) + 8.0 * ((depth >= mg[0]) & (depth <= mg[1]))
            self.agent.observe(pref * (mask < 0.5))
        audit = []
        proposals = arranger.propose_placements(self.agent, pano.data, spec, tuple(pl["count"]),
                                                tuple(pl["fine_grid"]), pl["mask_fraction"], audit)
        records = arranger.arrange(proposals, self.ctx["origin"], self.ctx["mesh"], self._bvh("mesh"), mask,
                                   self._seed("arrange") % (2 ** 31), bands, pl["spacing"])
        warnings = [a for a in audit if "warning" in a]
        n_valid = sum(r.valid for r in records)
        if n_valid < pl["count"][0]:
            log.warning("placement shortfall: %d valid placements, minimum %d", n_valid, pl["count"][0])
            warnings.append({"warning": "shortfall", "valid": n_valid, "minimum": pl["count"][0]})
        lib = arranger.load_asset_library(self.c["libraries"]["assets"])
        tags = self.cfg.tags
        for r in records:
            if not r.valid:
                continue
            tpl = arranger.select_template(self.agent, lib, tags, audit)
            r.template_id = tpl.id
            r.asset_prompt = arranger.design_prompt(self.agent, tags, tpl)
        transcript = getattr(self.agent, "transcript", [])
        return {"grid": spec, "suitability": mask, "records": records, "arrange_audit": audit,
                "arrange_warnings": warnings, "agent_transcript": list(transcript)}

    def emit_arrange(self):
        arranger.write_audit_log(self.out / "placements.jsonl", self.ctx["records"])
        doc = {"audit": self.ctx["arrange_audit"], "warnings": self.ctx["arrange_warnings"],
               "transcript": self.ctx["agent_transcript"],
               "excluded_cells": self.ctx["grid"].excluded(self.c["placement"]["mask_fraction"])}
        (self.out / "arrange_audit.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")
        grid_img = arranger.annotate_grid(self.ctx["pano"].data, self.ctx["grid"],
                                          self.c["placement"]["mask_fraction"])
        write_png(self.out / "grid.png", grid_img)

    def _background_ref(self, pixel, h, w):
        pano = self.ctx["pano"].data
        x, y = pixel
        cols = np.mod(np.arange(x - w // 2, x - w // 2 + w), pano.shape[1])
        rows = np.clip(np.arange(y - h // 2, y - h // 2 + h), 0, pano.shape[0] - 1)
        return pano[rows][:, cols, :3]

    def stage_assets(self):
        lib = {t.id: t for t in arranger.load_asset_library(self.c["libraries"]["assets"])}
        res = self.c["resolution"]["asset"]
        h, w = res, res // 2
        proxies, traces = [], []
        for k, r in enumerate(self.ctx["records"]):
            if not r.valid:
                continue
            tpl = lib[r.template_id]
            bg = self._background_ref(r.pixel, h, w)
            seed = self._seed("asset", k)
            margin = genbridge.DEFAULT_REFINE_MARGIN
            if r.band == arranger.FOREGROUND:
                mesh = read_template_mesh(tpl.mesh_path)
                group_tex, group_trace = {}, {}
                for gi, (gname, _) in enumerate(mesh["groups"]):
                    tr = []
                    alpha = tpl.group_alpha(gname, (h, w))
                    group_tex[gname] = genbridge.synthesize_asset_rgba(
                        self.backend, f"{r.asset_prompt}, {gname}", bg, alpha, seed + gi, margin, tr)
                    group_trace[gname] = tr
                first = next(iter(group_tex.values()))
                proxy = arranger.instantiate_proxy(r, first, self.ctx["origin"], tpl, mesh,
                                                   group_textures=group_tex)
                traces.append({"record": k, "band": r.band, "stages": group_trace})
            else:
                tr = []
                tex = genbridge.synthesize_asset_rgba(self.backend, r.asset_prompt, bg, None, seed, margin, tr)
                proxy = arranger.instantiate_proxy(r, tex, self.ctx["origin"], tpl)
                traces.append({"record": k, "band": r.band, "stages": {"card": tr}})
            proxy.record_index = k
            proxies.append(proxy)
        return {"proxies": proxies, "asset_traces": traces}

    def emit_assets(self):
        (self.out / "asset_traces.json").write_text(
            json.dumps(self.ctx["asset_traces"], indent=1, sort_keys=True) + "\n")

    def stage_immersion(self):
        im, res = self.c["immersion"], self.c["resolution"]["effects"]
        tags = self.cfg.tags
        seed = im["cloud_seed"] if im["cloud_seed"] is not None else self.c["seed"]
        textures = {"effect_cloud_noise": immersion.gen_cloud_noise(seed, res)}
        effects = [immersion.EffectDescriptor(
            "cloud", {"noise": "effect_cloud_noise"},
            {"flow_direction": [1.0, 0.0], "speed": 0.02, "layer_speeds": [0.01, 0.04]}, "sky_dome")]
        if (self.ctx["mesh"].region_tags == terrain.WATER).any():
            textures["effect_ripple"] = immersion.gen_ripple_map(max(res, 64))
            effects.append(immersion.EffectDescriptor(
                "ripple", {"ripple": "effect_ripple"},
                {"speed": 1.0, "decay": immersion.RIPPLE_DECAY, "layers": immersion.RIPPLE_LAYERS,
                 "grad_scale": immersion.RIPPLE_GRAD_SCALE}, "terrain"))
        rain = im["rain"] if im["rain"] is not None else bool({"rain", "rainy", "storm"} & set(tags))
        if rain:
            maps = immersion.gen_rain_maps(self.c["seed"], res, im["rain_density"])
            textures.update({"effect_rain_depth_bands": maps.depth_bands, "effect_rain_alpha": maps.alpha,
                             "effect_rain_normal": maps.normal})
            effects.append(immersion.EffectDescriptor(
                "rain", {"depth_bands": "effect_rain_depth_bands", "alpha": "effect_rain_alpha",
                         "normal": "effect_rain_normal"},
                {"bands_m": [list(b) for b in immersion.RAIN_BANDS], "spindle_radius": 15.0,
                 "spindle_height": 12.0, "fall_speed": 8.0}, "sky_dome"))
        lib = immersion.load_audio_library(self.c["libraries"]["audio"])
        picks = immersion.select_ambient(self.agent, tags, lib)
        clips = [(e.load(), vol) for e, vol in picks]
        mix = immersion.mix_tracks([(immersion.crossfade_loop(c, im["fade"]), v) for c, v in clips])
        audio = {"file": "audio/ambient.wav", "sample_rate": mix.sample_rate, "fade": im["fade"],
                 "tracks": [{"id": e.id, "volume": float(v)} for e, v in picks]}
        return {"effects": effects, "effect_textures": textures, "ambient": mix, "audio": audio}

    def _scene(self, shadow=None):
        matte = self.ctx["matte"].plane()[:, :, None]
        tex = np.concatenate([self.ctx["pano"].data[:, :, :3], matte], axis=2)
        scene = export.assemble_scene(self.ctx["mesh"], self.ctx["sky"], self.ctx["proxies"],
                                      self.ctx["effects"], self.ctx["audio"], self.ctx["origin"],
                                      self.ctx["effect_textures"], tex, self.ctx["bottom_texture"])
        scene.shadow = shadow
        return scene

    def stage_shadow(self):
        lt = self.c["lighting"]
        shadow = export.bake_shadow(self._scene(), lt["sun_dir"], self.c["resolution"]["shadow"], lt["s_min"])
        return {"shadow": shadow}

    def stage_assemble(self):
        scene = self._scene(self.ctx["shadow"])
        report = export.budget_report(scene, self.c["budget"]["triangles"])
        if not report.passed:
            log.warning("scene exceeds triangle budget: %d > %d", report.primitive_count, report.budget)
        return {"budget": report}

    def stage_export(self):
        return {"exported": True}

    def emit_export(self):
        scene = self._scene(self.ctx["shadow"])
        (self.out / "audio").mkdir(parents=True, exist_ok=True)
        immersion.write_wav(self.out / self.ctx["audio"]["file"], self.ctx["ambient"])
        export.export_scene(scene, self.out, self.c["budget"]["triangles"])


def run_pipeline(config, until=None, only=None, backend=None, agent=None, out_dir=None):
    p = Pipeline(config, backend, agent, out_dir)
    p.run(until=until, only=only)
    return p


def dump_depth(mesh_path, out_path, resolution, origin=None, eye_height=terrain.DEFAULT_EYE_HEIGHT):
    """Render panoramic depth of an OBJ mesh; ``.png`` writes a 16-bit preview, else raw float32."""
    obj = read_obj(mesh_path)
    mesh = terrain.TerrainMesh(obj.vertices, obj.triangles).validate()
    origin = terrain.default_origin(mesh, eye_height) if origin is None else np.asarray(origin, float)
    depth = render_erp_depth(mesh, origin, resolution)
    out_path = Path(out_path)
    if out_path.suffix.lower() == ".png":
        write_png(out_path, genbridge.depth_to_wire(depth.data), bits=16)
    else:
        write_raw(out_path, depth.data)
    return depth, origin


def depth_fit(src_path, lib_dir):
    from .imageio import read_raw

    depth = ErpImage(read_raw(src_path))
    lib = depthadapt.load_library(lib_dir)
    q = depthadapt.thumbnail(depth)
    ref = depthadapt.retrieve_reference(q, lib)
    poly = depthadapt.fit_remap(q, ref)
    return dict(poly.to_dict(), reference=ref.id, similarity=depthadapt.cosine(q, ref))
