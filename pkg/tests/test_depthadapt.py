import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxyworld import depthadapt as D
from proxyworld.errors import DegenerateQuery, EmptyLibrary, RankDeficient
from proxyworld.panorama import SKY_DEPTH, ErpImage


def thumb(samples, id="t"):
    return D.DepthThumb(id, np.asarray(samples, float))


def smooth_samples(seed):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:16, 0:32] / np.array([16.0, 32.0])[:, None, None]
    a, b, c = rng.uniform(0.5, 3, 3)
    return (2 + a * yy + b * np.sin(2 * np.pi * xx + c) ** 2 + 0.3 * rng.random((16, 32))).ravel()


def normal_equations_fit(s, r):
    # independent oracle: explicit normal equations on a Vandermonde matrix
    x = (s - s.min()) / (s.max() - s.min())
    A = np.vander(x, 4)
    coef = np.linalg.solve(A.T @ A, A.T @ r)
    return coef, np.sqrt(np.mean((A @ coef - r) ** 2))


# -- retrieval -----------------------------------------------------------------

def test_identical_entry_retrieved():
    lib = [thumb(smooth_samples(i), f"r{i}") for i in range(5)]
    q = thumb(lib[3].samples, "q")
    best = D.retrieve_reference(q, lib)
    assert best.id == "r3"
    assert D.cosine(q, best) == pytest.approx(1.0, abs=1e-12)


def test_orthogonal_entry_zero_similarity():
    base = np.zeros(512)
    base[:256] = 1.0
    other = np.tile([1.0, 0.0], 256)
    assert D.cosine(thumb(base), thumb(other)) == pytest.approx(0.0, abs=1e-12)


def test_mean_subtraction_pinned():
    # raw vectors are nearly parallel because of their offset; centred ones are not
    a = 100 + np.tile([1.0, -1.0], 256)
    b = 100 + np.repeat([1.0, -1.0], 256)
    assert D.cosine(thumb(a), thumb(b)) == pytest.approx(0.0, abs=1e-12)


def test_retrieval_errors():
    with pytest.raises(EmptyLibrary):
        D.retrieve_reference(thumb(smooth_samples(0)), [])
    with pytest.raises(DegenerateQuery):
        D.retrieve_reference(thumb(np.full(512, 4.0)), [thumb(smooth_samples(0))])


def brute_argmax(q, lib):
    qv = q.samples - q.samples.mean()
    best = None
    for r in lib:
        rv = r.samples - r.samples.mean()
        c = qv @ rv / (np.linalg.norm(qv) * np.linalg.norm(rv))
        if best is None or c > best[0] + 1e-15 or (abs(c - best[0]) <= 1e-15 and r.id < best[1]):
            best = (c, r.id)
    return best[1]


def test_retrieval_matches_exhaustive_scan():
    rng = np.random.default_rng(42)
    lib = [thumb(rng.random(512), f"e{i:02d}") for i in range(50)]
    for _ in range(20):
        q = thumb(rng.random(512), "q")
        assert D.retrieve_reference(q, lib).id == brute_argmax(q, lib)


def test_retrieval_scale_invariant():
    rng = np.random.default_rng(1)
    lib = [thumb(rng.random(512) + 1, f"e{i}") for i in range(20)]
    q = thumb(rng.random(512))
    scaled = [thumb(t.samples * 7.5, t.id) for t in lib]
    assert D.retrieve_reference(q, lib).id == D.retrieve_reference(q, scaled).id


# -- fitting -------------------------------------------------------------------

def test_identity_fit():
    s = smooth_samples(3)
    p = D.fit_remap(thumb(s), thumb(s))
    assert np.sqrt(np.mean((p(s) - s) ** 2)) < 1e-6


def test_affine_raw_coefficients():
    s = smooth_samples(4)
    p = D.fit_remap(thumb(s), thumb(2 * s + 1))
    assert np.max(np.abs(p.raw_coefficients() - [0, 0, 2, 1])) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4), st.integers(0, 1000))
def test_exact_cubic_recovered(coef, seed):
    s = smooth_samples(seed)
    x = (s - s.min()) / (s.max() - s.min())
    p = D.fit_remap(thumb(s), thumb(np.polyval(coef, x)))
    assert np.max(np.abs(p.coefficients - coef)) < 1e-6


def test_noisy_fit_matches_normal_equations():
    rng = np.random.default_rng(9)
    for seed in range(5):
        s = smooth_samples(seed)
        x = (s - s.min()) / (s.max() - s.min())
        r = np.polyval([0.5, -1.0, 2.0, 0.3], x) + 0.01 * rng.standard_normal(512)
        p = D.fit_remap(thumb(s), thumb(r))
        coef, resid = normal_equations_fit(s, r)
        assert p.residual_rms <= resid + 1e-9
        assert abs(p.residual_rms - resid) < 1e-9
        assert np.allclose(p.coefficients, coef, atol=1e-8)


def test_sky_pairs_excluded():
    s = smooth_samples(2)
    r = 3 * s
    s2, r2 = s.copy(), r.copy()
    s2[:40] = SKY_DEPTH
    r2[100:120] = SKY_DEPTH
    p = D.fit_remap(thumb(s2), thumb(r2))
    keep = np.ones(512, bool)
    keep[:40] = keep[100:120] = False
    assert p.src_range == (s[keep].min(), s[keep].max())
    assert np.max(np.abs(p.raw_coefficients() - [0, 0, 3, 0])) < 1e-6


def test_rank_deficient():
    s = np.repeat([1.0, 2.0, 3.0], [200, 200, 112])
    with pytest.raises(RankDeficient):
        D.fit_remap(thumb(s), thumb(s))


def test_monotonic_flag():
    s = smooth_samples(0)
    x = (s - s.min()) / (s.max() - s.min())
    assert D.fit_remap(thumb(s), thumb(x ** 3)).monotonic
    assert not D.fit_remap(thumb(s), thumb((x - 0.5) ** 2)).monotonic


# -- application -----------------------------------------------------------------

def depth_map(w=128):
    h = w // 2
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w], float)[:, None, None]
    d = 3 + 20 * yy ** 2 + 2 * np.cos(2 * np.pi * xx)
    d[: h // 3] = SKY_DEPTH
    return ErpImage(d)


def test_identity_poly_keeps_values():
    img = depth_map()
    q = D.thumbnail(img)
    p = D.fit_remap(q, q)
    out = D.apply_remap(p, img).plane()
    sky = img.plane() == SKY_DEPTH
    assert np.allclose(out[~sky], img.plane()[~sky], atol=1e-6)
    assert np.array_equal(out[sky], img.plane()[sky])


def test_sky_preserved_and_clamped():
    img = depth_map()
    p = D.RemapPolynomial(-50.0, 0.0, 0.0, 10.0, (3.0, 25.0), ref_max=4.0)
    out = D.apply_remap(p, img).plane()
    sky = img.plane() == SKY_DEPTH
    assert np.all(out[sky] == SKY_DEPTH)
    assert out[~sky].min() >= 0 and out[~sky].max() <= 1.05 * 4.0
    assert np.all(np.isfinite(out))


def test_full_res_consistent_with_thumb_fit():
    img = depth_map(256)
    q = D.thumbnail(img)
    ref = thumb(np.where(q.samples >= SKY_DEPTH, SKY_DEPTH, D.estimated_style(q.samples)), "ref")
    p = D.fit_remap(q, ref)
    back = D.thumbnail(D.apply_remap(p, img)).samples
    land = q.samples < SKY_DEPTH
    err = np.sqrt(np.mean((back[land] - p(q.samples[land])) ** 2))
    assert err <= p.residual_rms + 1e-3


def test_thumbnail_block_average_ignores_sky():
    d = np.full((32, 64), 5.0)
    d[0:2, 0:2] = SKY_DEPTH
    d[0, 2] = SKY_DEPTH
    t = D.thumbnail(d).as_image()
    assert t[0, 0] == SKY_DEPTH
    assert t[0, 1] == 5.0


def test_library_round_trip(tmp_path):
    lib = [thumb(smooth_samples(i), f"x{i}") for i in range(3)]
    D.save_library(tmp_path, lib)
    back = D.load_library(tmp_path)
    assert [t.id for t in back] == ["x0", "x1", "x2"]
    # stored as float32
    assert np.allclose(back[1].samples, lib[1].samples, rtol=1e-6)


def test_estimated_style_shape():
    d = np.array([0.0, 2.0, 1e3, SKY_DEPTH])
    e = D.estimated_style(d, a=8, b=2)
    assert e[0] == 0.0
    assert e[1] == pytest.approx(2.0)
    assert np.all(np.diff(e) > 0)
    assert e[-1] == 4.0
