import numpy as np
import pytest

from proxyworld import immersion as I
from proxyworld.arranger import ScriptedAgent
from proxyworld.errors import AgentUnavailable, ClipTooShort, SampleRateMismatch

SR = 44100


def sine(freq=440.0, seconds=2.0, amp=0.5, sr=SR):
    t = np.arange(int(seconds * sr)) / sr
    return I.AudioClip(sr, amp * np.sin(2 * np.pi * freq * t))


# -- clouds ------------------------------------------------------------------------

def test_cloud_deterministic_and_two_channels():
    a = I.gen_cloud_noise(3, 64)
    assert a.shape == (64, 64, 2)
    assert np.array_equal(a, I.gen_cloud_noise(3, 64))
    assert not np.array_equal(a, I.gen_cloud_noise(4, 64))


def test_cloud_frequency_ordering():
    for seed in range(5):
        t = I.gen_cloud_noise(seed, 128)
        assert I.spectral_centroid(t[..., 0]) < I.spectral_centroid(t[..., 1])


def test_cloud_periodic():
    n = I.CloudNoise(1, 64)
    y = np.arange(64.0)
    assert np.allclose(n.evaluate(np.zeros(64), y), n.evaluate(np.full(64, 64.0), y), atol=1e-12)
    assert np.allclose(n.evaluate(y, np.zeros(64)), n.evaluate(y, np.full(64, 64.0)), atol=1e-12)


def test_cloud_requires_power_of_two():
    with pytest.raises(ValueError):
        I.gen_cloud_noise(0, 96)


# -- rain --------------------------------------------------------------------------

def test_rain_zero_density_black():
    m = I.gen_rain_maps(0, 64, 0)
    assert not m.depth_bands.any() and not m.alpha.any() and not m.normal.any()


def test_rain_band_exclusivity():
    for seed in range(10):
        m = I.gen_rain_maps(seed, 128, 6.0)
        nonzero = np.count_nonzero(m.depth_bands, axis=2)
        assert nonzero.max() == 1
        assert np.array_equal(nonzero == 1, m.alpha > 0)
        assert not m.normal[m.alpha == 0].any()


def test_rain_band_matches_drop_depth():
    m = I.gen_rain_maps(2, 128, 1.0)
    assert set(np.unique(m.drops[:, 3]).tolist()) <= {0.0, 1.0, 2.0}
    assert np.array_equal(m.drops[:, 3], np.minimum(m.drops[:, 2] // 5, 2))
    assert np.all((m.drops[:, 2] >= 0) & (m.drops[:, 2] < 15))


def test_rain_reproducible():
    a, b = I.gen_rain_maps(9, 64, 2.0), I.gen_rain_maps(9, 64, 2.0)
    assert np.array_equal(a.depth_bands, b.depth_bands) and np.array_equal(a.normal, b.normal)


# -- ripples -------------------------------------------------------------------------

def test_ripple_centre_and_range():
    t = I.gen_ripple_map(128)
    assert t[64, 64, 0] == 0.0
    assert t[..., 0].max() <= 1.0
    assert t.min() >= 0 and t.max() <= 1


def test_ripple_gradient_vs_finite_differences():
    res = 256
    t = I.gen_ripple_map(res)
    gx, gy = I.decode_ripple_gradient(t)
    x, y = I.ripple_coords(res)
    h = 1e-5
    fx = (I.ripple_profile(x + h, y) - I.ripple_profile(x - h, y)) / (2 * h)
    fy = (I.ripple_profile(x, y + h) - I.ripple_profile(x, y - h)) / (2 * h)
    away = np.hypot(x, y) > 2e-3
    assert np.max(np.abs(gx - fx)[away]) <= 1e-3
    assert np.max(np.abs(gy - fy)[away]) <= 1e-3


def test_ripple_decay():
    for t in np.linspace(0, 1, 11):
        assert abs(I.ripple_amplitude(1.0, t)) <= abs(I.ripple_amplitude(0.25, t)) or \
            abs(I.ripple_amplitude(1.0, t)) <= np.exp(-I.RIPPLE_DECAY)
    assert I.ripple_amplitude(0.0, 0.0) <= 1.0


def test_ripple_too_small():
    with pytest.raises(ValueError):
        I.gen_ripple_map(32)


# -- audio -------------------------------------------------------------------------

def test_dc_preserved_exactly():
    clip = I.AudioClip(SR, np.full(SR, 0.3))
    out = I.crossfade_loop(clip, 0.25)
    assert len(out.samples) == SR - SR // 4
    assert np.all(out.samples == 0.3)


def test_zero_fade_identity():
    clip = sine(seconds=0.5)
    assert np.array_equal(I.crossfade_loop(clip, 0).samples, clip.samples)


def test_short_clip_rejected():
    with pytest.raises(ClipTooShort):
        I.crossfade_loop(sine(seconds=0.9), 0.5)


def test_sine_loop_boundary():
    clip = sine(seconds=2.0)
    out = I.crossfade_loop(clip, 0.5).samples[:, 0]
    body = np.abs(np.diff(out)).max()
    boundary = abs(out[0] - out[-1])
    assert boundary <= body
    loop = np.concatenate([out, out])
    assert np.abs(np.diff(loop)).max() <= np.abs(np.diff(clip.samples[:, 0])).max() + 1e-12


def test_mix_identity_and_halves():
    clip = sine(seconds=1.0)
    assert np.array_equal(I.mix_tracks([(clip, 1.0)]).samples, clip.samples)
    two = I.mix_tracks([(clip, 0.5), (clip, 0.5)])
    assert np.max(np.abs(two.samples - clip.samples)) <= 1e-6


def test_mix_rate_mismatch():
    with pytest.raises(SampleRateMismatch):
        I.mix_tracks([(sine(), 0.5), (sine(sr=48000), 0.5)])


def test_mix_peak_bounded():
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = rng.integers(1, 4)
        sel = [(I.AudioClip(SR, rng.uniform(-1, 1, int(rng.integers(2000, 6000)))), float(rng.uniform(0.1, 1)))
               for _ in range(k)]
        out = I.mix_tracks(sel)
        assert np.abs(out.samples).max() <= 1.0
        assert len(out.samples) == max(len(c.samples) for c, _ in sel)


def test_mix_loops_shorter_clip():
    long = I.AudioClip(SR, np.zeros(SR))
    short = I.AudioClip(SR, np.full(SR // 4, 0.2))
    out = I.mix_tracks([(long, 1.0), (short, 1.0)])
    assert np.allclose(out.samples, 0.2)


def entry(id, tags):
    return I.AudioEntry(id, f"{id}.wav", tuple(tags))


def test_stub_ambient_ranking():
    lib = [entry("birds", ["birds", "forest", "lake"]), entry("wind", ["wind", "lake"]),
           entry("traffic", ["city"])]
    got = I.stub_select_ambient({"lake", "birds"}, lib)
    assert [e.id for e, _ in got] == ["birds", "wind"]
    assert all(0 < v <= 1 for _, v in got)
    assert got[0][1] == 1.0


def test_single_clip_library():
    got = I.stub_select_ambient({"x"}, [entry("only", ["y"])])
    assert len(got) == 1


def test_stub_matches_topk_oracle():
    rng = np.random.default_rng(2)
    vocab = list("abcdefgh")
    lib = [entry(f"c{i}", rng.choice(vocab, 3, replace=False)) for i in range(10)]
    for _ in range(20):
        tags = set(rng.choice(vocab, 3, replace=False))
        scores = sorted(((-len(tags & set(e.tags)), e.id) for e in lib))
        expect = [i for s, i in scores if s < 0][:3] or [scores[0][1]]
        assert [e.id for e, _ in I.stub_select_ambient(tags, lib)] == expect


def test_agent_ambient_validated():
    lib = [entry("birds", ["birds"]), entry("wind", ["wind"])]
    agent = ScriptedAgent({"ambient": [["wind", 0.6], ["wind", 0.3], ["ghost", 1.0], ["birds", 1.5]]})
    got = I.select_ambient(agent, {"birds"}, lib)
    assert [(e.id, v) for e, v in got] == [("wind", 0.6)]


def test_agent_unavailable_falls_back():
    class Down:
        def select_ambient(self, *a):
            raise AgentUnavailable("down")

    lib = [entry("birds", ["birds"]), entry("wind", ["wind"])]
    assert [e.id for e, _ in I.select_ambient(Down(), {"wind"}, lib)] == ["wind"]


def test_wav_round_trip(tmp_path):
    clip = sine(seconds=0.2)
    I.write_wav(tmp_path / "a.wav", clip)
    back = I.read_wav(tmp_path / "a.wav")
    assert back.sample_rate == SR
    assert np.max(np.abs(back.samples - clip.samples)) < 1 / 32767
    I.write_wav(tmp_path / "b.wav", clip, float32=True)
    assert np.allclose(I.read_wav(tmp_path / "b.wav").samples, clip.samples, atol=1e-7)


def test_audioclip_invariants():
    with pytest.raises(ValueError):
        I.AudioClip(22050, np.zeros(10))
    with pytest.raises(ValueError):
        I.AudioClip(SR, np.array([1.5]))


def test_effect_descriptor_validation():
    I.EffectDescriptor("cloud", {"noise": "a.png"}, {"speed": 0.1}).validate()
    with pytest.raises(ValueError):
        I.EffectDescriptor("rain", {"alpha": "a.png"}).validate()
    with pytest.raises(ValueError):
        I.EffectDescriptor("cloud", {"noise": "a.png"}, {"speed": float("nan")}).validate()
