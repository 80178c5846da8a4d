"""Shader-parameter textures for clouds, rain and ripples, plus ambient audio.

Channel layouts:

* cloud noise: R low-frequency value noise, G value noise at 8x the frequency.
* rain: ``depth_bands`` RGB holds drops at 0-5 m (R), 5-10 m (G), 10-15 m (B);
  ``alpha`` the drop shape; ``normal`` the packed refraction normal
  ``(0.5 + 0.5 nx, 0.5 + 0.5 ny, nz)`` multiplied by the drop coverage, so
  texels without drops are black.
* ripple: R normalized radial distance, G/B the x/y gradient of the ring
  profile stored as ``0.5 + gradient * RIPPLE_GRAD_SCALE``, A time offset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import AgentUnavailable, ClipTooShort, SampleRateMismatch
from .noise import lattice, eval_periodic, periodic_noise, stable_rng

CLOUD_BASE_FREQ = 4
RAIN_BANDS = ((0.0, 5.0), (5.0, 10.0), (10.0, 15.0))
RIPPLE_RINGS = 4.0
RIPPLE_DECAY = 3.0
RIPPLE_LAYERS = 4
RIPPLE_GRAD_SCALE = 1.0 / 64.0
SAMPLE_RATES = (44100, 48000)
MAX_TRACKS = 3


@dataclass
class EffectDescriptor:
    effect: str
    textures: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    target: str = ""

    REQUIRED = {"cloud": ("noise",), "rain": ("depth_bands", "alpha", "normal"),
                "ripple": ("ripple",)}

    def validate(self):
        if self.effect not in self.REQUIRED:
            raise ValueError(f"unknown effect {self.effect!r}")
        missing = [t for t in self.REQUIRED[self.effect] if t not in self.textures]
        if missing:
            raise ValueError(f"{self.effect} effect missing textures {missing}")
        for k, v in self.params.items():
            if not np.all(np.isfinite(np.asarray(v, float))):
                raise ValueError(f"{self.effect} param {k} is not finite")
        return self

    def to_dict(self):
        return {"effect": self.effect, "textures": dict(self.textures),
                "params": self.params, "target": self.target}


# ---------------------------------------------------------------------------
# clouds
# ---------------------------------------------------------------------------

class CloudNoise:
    """Two-octave periodic value noise; evaluable at arbitrary texel coordinates."""

    def __init__(self, seed, resolution, base_freq=CLOUD_BASE_FREQ):
        if resolution <= 0 or resolution & (resolution - 1):
            raise ValueError("resolution must be a power of two")
        rng = stable_rng("cloud", seed)
        self.resolution = resolution
        self.low = lattice(rng, base_freq, base_freq)
        self.high = lattice(rng, 8 * base_freq, 8 * base_freq)

    def evaluate(self, x, y):
        """Channels at texel coordinates ``(x, y)``; period = ``resolution``."""
        r = self.resolution
        lo = eval_periodic(self.low, np.asarray(x) / r * self.low.shape[1],
                           np.asarray(y) / r * self.low.shape[0])
        hi = eval_periodic(self.high, np.asarray(x) / r * self.high.shape[1],
                           np.asarray(y) / r * self.high.shape[0])
        return np.stack([lo, hi], axis=-1)

    def texture(self):
        i = np.arange(self.resolution, dtype=float)
        xx, yy = np.meshgrid(i, i)
        return self.evaluate(xx, yy)


def gen_cloud_noise(seed, resolution, base_freq=CLOUD_BASE_FREQ):
    return CloudNoise(seed, resolution, base_freq).texture()


def spectral_centroid(channel):
    """Mean radial frequency (cycles/texture) weighted by power, DC removed."""
    c = np.asarray(channel, float)
    p = np.abs(np.fft.fft2(c - c.mean())) ** 2
    fy = np.fft.fftfreq(c.shape[0]) * c.shape[0]
    fx = np.fft.fftfreq(c.shape[1]) * c.shape[1]
    r = np.hypot(*np.meshgrid(fx, fy))
    return float((r * p).sum() / p.sum())


# ---------------------------------------------------------------------------
# rain
# ---------------------------------------------------------------------------

@dataclass
class RainMaps:
    depth_bands: np.ndarray
    alpha: np.ndarray
    normal: np.ndarray
    drops: np.ndarray  # (n, 4): x, y, depth, band


def gen_rain_maps(seed, resolution, drop_density, drop_len=14.0, drop_width=3.0):
    """Spindle-shaped raindrop sprites, each assigned to one depth band.

    ``drop_density`` is the expected number of drops per 32x32 texels.
    Overlapping drops resolve by depth (nearest wins), which keeps the band
    channels mutually exclusive.
    """
    if drop_density < 0:
        raise ValueError("drop_density must be non-negative")
    r = resolution
    bands = np.zeros((r, r, 3))
    alpha = np.zeros((r, r))
    normal = np.zeros((r, r, 3))
    zbuf = np.full((r, r), np.inf)
    rng = stable_rng("rain", seed, resolution, drop_density)
    n = int(round(drop_density * r * r / 1024.0))
    xs = rng.random(n) * r
    ys = rng.random(n) * r
    depth = rng.random(n) * RAIN_BANDS[-1][1]
    band = np.minimum((depth // 5.0).astype(int), 2)
    half_l, half_w = drop_len / 2.0, drop_width / 2.0
    for x0, y0, d, b in zip(xs, ys, depth, band):
        # drops shrink with distance
        s = 1.0 - 0.5 * d / RAIN_BANDS[-1][1]
        hl, hw = half_l * s, half_w * s
        ix = np.arange(int(np.floor(x0 - hw)), int(np.ceil(x0 + hw)) + 1)
        iy = np.arange(int(np.floor(y0 - hl)), int(np.ceil(y0 + hl)) + 1)
        gx, gy = np.meshgrid(ix, iy)
        px = (gx + 0.5 - x0) / hw
        py = (gy + 0.5 - y0) / hl
        # spindle: width tapers linearly toward both tips
        taper = np.maximum(1.0 - np.abs(py), 0.0)
        rr = np.abs(px) / np.maximum(taper, 1e-6)
        inside = (np.abs(py) < 1.0) & (rr < 1.0)
        if not inside.any():
            continue
        a = (1.0 - rr ** 2) * taper
        tx, ty = np.mod(gx, r), np.mod(gy, r)
        sel = inside & (a > 0) & (d < zbuf[ty, tx])
        if not sel.any():
            continue
        tx, ty, a, px, py = tx[sel], ty[sel], a[sel], px[sel], py[sel]
        zbuf[ty, tx] = d
        alpha[ty, tx] = a
        lo = RAIN_BANDS[b][0]
        bands[ty, tx, :] = 0.0
        bands[ty, tx, b] = 0.2 + 0.8 * (d - lo) / 5.0
        nx, ny = -px * 0.8, -py * 0.3
        nz = np.sqrt(np.maximum(1.0 - nx ** 2 - ny ** 2, 0.0))
        normal[ty, tx] = np.stack([0.5 + 0.5 * nx, 0.5 + 0.5 * ny, nz], axis=1) * a[:, None]
    drops = np.stack([xs, ys, depth, band.astype(float)], axis=1) if n else np.zeros((0, 4))
    return RainMaps(bands, alpha, normal, drops)


# ---------------------------------------------------------------------------
# ripples
# ---------------------------------------------------------------------------

def ripple_profile(x, y, rings=RIPPLE_RINGS, k=RIPPLE_DECAY):
    """Ring height field at normalized texture coordinates (centre at the centre texel)."""
    r = np.hypot(x, y)
    return np.cos(2 * np.pi * rings * r) * np.exp(-k * r)


def ripple_gradient(x, y, rings=RIPPLE_RINGS, k=RIPPLE_DECAY):
    r = np.hypot(x, y)
    w = 2 * np.pi * rings
    dh_dr = -(w * np.sin(w * r) + k * np.cos(w * r)) * np.exp(-k * r)
    with np.errstate(invalid="ignore", divide="ignore"):
        gx = np.where(r > 0, dh_dr * x / r, 0.0)
        gy = np.where(r > 0, dh_dr * y / r, 0.0)
    return gx, gy


def ripple_coords(resolution):
    """Normalized offsets of each texel centre from the centre texel, in units of half-size."""
    c = resolution // 2
    i = (np.arange(resolution) - c) / (resolution / 2.0)
    return np.meshgrid(i, i)


def gen_ripple_map(resolution):
    if resolution < 64:
        raise ValueError("ripple map resolution must be at least 64")
    x, y = ripple_coords(resolution)
    r = np.clip(np.hypot(x, y), 0.0, 1.0)
    gx, gy = ripple_gradient(x, y)
    offset = periodic_noise(stable_rng("ripple"), resolution, resolution, 8, 8)
    out = np.stack([r, 0.5 + gx * RIPPLE_GRAD_SCALE, 0.5 + gy * RIPPLE_GRAD_SCALE, offset], axis=-1)
    return out


def decode_ripple_gradient(tex):
    return (tex[..., 1] - 0.5) / RIPPLE_GRAD_SCALE, (tex[..., 2] - 0.5) / RIPPLE_GRAD_SCALE


def ripple_amplitude(r, t, layers=RIPPLE_LAYERS, k=RIPPLE_DECAY, rings=RIPPLE_RINGS, speed=1.0):
    """Reference evaluator: ``layers`` phase-shifted rings superposed under ``exp(-k r)``."""
    r = np.asarray(r, float)
    # layers lag each other by an eighth of a ring period
    offsets = np.arange(layers) / (8.0 * rings * speed)
    phase = 2 * np.pi * rings * (r[..., None] - speed * (np.asarray(t, float)[..., None] + offsets))
    return np.exp(-k * r) * np.cos(phase).mean(axis=-1)


# ---------------------------------------------------------------------------
# audio
# ---------------------------------------------------------------------------

@dataclass
class AudioClip:
    sample_rate: int
    samples: np.ndarray
    tags: tuple = ()
    id: str = ""

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[:, None]
        self.samples = s
        if self.sample_rate not in SAMPLE_RATES:
            raise ValueError(f"unsupported sample rate {self.sample_rate}")
        if np.any(np.abs(s) > 1.0):
            raise ValueError("PCM samples exceed [-1, 1]")

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate

    @property
    def channels(self):
        return self.samples.shape[1]

    @property
    def loudness(self):
        return float(np.sqrt(np.mean(self.samples ** 2))) if len(self.samples) else 0.0


def crossfade_loop(clip: AudioClip, fade, equal_power=False) -> AudioClip:
    """Fold the last ``fade`` seconds onto the start so the clip loops seamlessly.

    Output length is ``len - n_fade``. Linear fades use a lerp so a DC signal
    is preserved exactly.
    """
    n = int(round(fade * clip.sample_rate))
    x = clip.samples
    if len(x) <= 2 * n:
        raise ClipTooShort(f"clip of {clip.duration:.3f}s cannot crossfade {fade}s twice over")
    if n == 0:
        return AudioClip(clip.sample_rate, x.copy(), clip.tags, clip.id)
    out = x[:len(x) - n].copy()
    head = x[:n]
    tail = x[len(x) - n:]
    w = (np.arange(n) / n)[:, None]
    if equal_power:
        out[:n] = tail * np.cos(0.5 * np.pi * w) + head * np.sin(0.5 * np.pi * w)
    else:
        out[:n] = tail + w * (head - tail)
    return AudioClip(clip.sample_rate, np.clip(out, -1.0, 1.0), clip.tags, clip.id)


def loop_to_length(clip, n_samples, fade=None):
    if len(clip.samples) >= n_samples:
        return clip.samples[:n_samples]
    fade = min(1.0, clip.duration / 4.0) if fade is None else fade
    looped = crossfade_loop(clip, fade).samples
    reps = -(-n_samples // len(looped))
    return np.tile(looped, (reps, 1))[:n_samples]


def mix_tracks(selections) -> AudioClip:
    """Weighted sum of up to three clips, shorter ones looped to the longest.

    If the summed peak exceeds 1 the whole mix is soft-clipped with ``tanh``.
    """
    if not selections:
        raise ValueError("nothing to mix")
    if len(selections) > MAX_TRACKS:
        raise ValueError(f"at most {MAX_TRACKS} tracks")
    rates = {c.sample_rate for c, _ in selections}
    if len(rates) != 1:
        raise SampleRateMismatch(f"sample rates differ: {sorted(rates)}")
    n = max(len(c.samples) for c, _ in selections)
    ch = max(c.channels for c, _ in selections)
    acc = np.zeros((n, ch))
    for clip, vol in selections:
        acc += vol * loop_to_length(clip, n)
    if np.abs(acc).max() > 1.0:
        acc = np.tanh(acc)
    return AudioClip(rates.pop(), acc, tuple(sorted({t for c, _ in selections for t in c.tags})), "mix")


@dataclass
class AudioEntry:
    id: str
    path: str
    tags: tuple

    def load(self):
        return read_wav(self.path, self.tags, self.id)


def load_audio_library(index_path):
    index_path = Path(index_path)
    doc = json.loads(index_path.read_text())
    return [AudioEntry(e["id"], str(index_path.parent / e["file"]), tuple(sorted(e.get("tags", []))))
            for e in doc["clips"]]


def stub_select_ambient(scene_tags, library, k=MAX_TRACKS):
    """Top-``k`` clips by tag overlap (ties by id); at least one clip is always chosen.

    Volume is the overlap relative to the best score, floored at 0.25.
    """
    if not library:
        raise ValueError("audio library is empty")
    tags = set(scene_tags)
    scored = sorted(((len(tags & set(e.tags)), e.id, e) for e in library), key=lambda s: (-s[0], s[1]))
    chosen = [s for s in scored if s[0] > 0][:k] or scored[:1]
    best = max(chosen[0][0], 1)
    return [(e, max(score / best, 0.25)) for score, _, e in chosen]


def select_ambient(agent, scene_tags, library):
    if agent is not None:
        try:
            reply = agent.select_ambient(sorted(scene_tags), [e.id for e in library])
        except AgentUnavailable:
            reply = None
        if reply:
            by_id = {e.id: e for e in library}
            picks, seen = [], set()
            for clip_id, vol in reply[:MAX_TRACKS]:
                if clip_id in by_id and clip_id not in seen and 0 < vol <= 1:
                    picks.append((by_id[clip_id], float(vol)))
                    seen.add(clip_id)
            if picks:
                return picks
    return stub_select_ambient(scene_tags, library)


def write_wav(path, clip: AudioClip, float32=False):
    s = clip.samples if clip.channels > 1 else clip.samples[:, 0]
    if float32:
        wavfile.write(str(path), clip.sample_rate, s.astype(np.float32))
    else:
        wavfile.write(str(path), clip.sample_rate, np.round(s * 32767).astype(np.int16))


def read_wav(path, tags=(), id=""):
    rate, s = wavfile.read(str(path))
    if s.dtype == np.int16:
        s = s.astype(np.float64) / 32767.0
    elif s.dtype == np.int32:
        s = s.astype(np.float64) / 2147483647.0
    else:
        s = s.astype(np.float64)
    return AudioClip(int(rate), np.clip(s, -1.0, 1.0), tuple(tags), id)
