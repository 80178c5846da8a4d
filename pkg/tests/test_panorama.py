import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxyworld import panorama as P
from proxyworld.errors import BadTiling, CoverageGap, DegenerateMesh, ZeroVector
from proxyworld.terrain import TerrainMesh

from conftest import grid_plane


def scalar_uv(x, y, z):
    # straight transcription with the math module, used as the oracle
    n = math.sqrt(x * x + y * y + z * z)
    u = math.atan2(x, -z) / (2 * math.pi) + 0.5
    u = u % 1.0
    v = math.asin(y / n) / math.pi + 0.5
    return u, v


def test_anchor_directions():
    assert np.allclose(P.dir_to_erp_uv([0, 0, -1]), [0.5, 0.5], atol=0)
    assert np.allclose(P.dir_to_erp_uv([1, 0, 0]), [0.75, 0.5], atol=0)
    assert P.dir_to_erp_uv([0, 1, 0])[1] == 1.0
    assert P.dir_to_erp_uv([0, -1, 0])[1] == 0.0


def test_inverse_anchors():
    assert np.allclose(P.erp_uv_to_dir([0.5, 0.5]), [0, 0, -1], atol=1e-15)
    assert np.allclose(P.erp_uv_to_dir([0.75, 0.5]), [1, 0, 0], atol=1e-15)


def test_zero_vector_rejected():
    with pytest.raises(ZeroVector):
        P.dir_to_erp_uv([0.0, 0.0, 0.0])


def test_u_wrapped_half_open():
    # atan2(-0.0, 1) style directions land at u=0 and never at 1
    uv = P.dir_to_erp_uv([[-1e-300, 0, 1], [0, 0, 1], [1e-300, 0, 1]])
    assert np.all((uv[:, 0] >= 0) & (uv[:, 0] < 1))


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_matches_scalar_oracle(x, y, z):
    if x * x + y * y + z * z < 1e-6:
        return
    u, v = P.dir_to_erp_uv([x, y, z])
    ou, ov = scalar_uv(x, y, z)
    du = abs(u - ou)
    assert min(du, 1 - du) < 1e-12
    assert abs(v - ov) < 1e-12


def test_uv_round_trip_random():
    rng = np.random.default_rng(3)
    uv = np.stack([rng.random(1000), rng.uniform(0.001, 0.999, 1000)], axis=1)
    back = P.dir_to_erp_uv(P.erp_uv_to_dir(uv))
    assert np.max(np.abs(back - uv)) < 1e-6


def test_pixel_centres():
    uv = P.pixel_uv(8, 4)
    assert uv.shape == (4, 8, 2)
    assert uv[0, 0, 0] == pytest.approx(1 / 16)
    assert uv[0, 0, 1] == pytest.approx(1 - 1 / 8)
    assert uv[-1, -1, 1] == pytest.approx(1 / 8)


def test_bilinear_wraps_and_clamps():
    img = np.zeros((2, 4, 1))
    img[:, 0] = 1.0
    # halfway between the last and the first column
    assert P.sample_bilinear(img, [1.0, 0.75])[0] == pytest.approx(0.5)
    img2 = np.array([[[1.0]] * 4, [[3.0]] * 4]).reshape(2, 4, 1)
    assert P.sample_bilinear(img2, [0.3, 1.0])[0] == 1.0
    assert P.sample_bilinear(img2, [0.3, 0.0])[0] == 3.0


def test_erp_requires_two_to_one():
    with pytest.raises(ValueError):
        P.ErpImage(np.zeros((4, 4)))


# -- depth -------------------------------------------------------------------

def test_depth_on_plane_analytic(plane_mesh):
    origin = np.array([0.0, 2.0, 0.0])
    depth = P.render_erp_depth(plane_mesh, origin, 128).plane()
    dirs = P.pixel_dirs(128, 64)
    below = dirs[..., 1] < -0.05
    t = 2.0 / -dirs[..., 1]
    inside = below & (np.abs(dirs[..., 0] * t) < 199) & (np.abs(dirs[..., 2] * t) < 199)
    assert np.max(np.abs(depth[inside] - t[inside])) < 1e-4
    assert np.all(depth[dirs[..., 1] > 0] == P.SKY_DEPTH)
    assert np.all(depth > 0)


def test_nadir_and_45_degrees(plane_mesh):
    origin = (0.0, 2.0, 0.0)
    from proxyworld.raycast import BVH

    bvh = BVH(plane_mesh.vertices, plane_mesh.triangles)
    dirs = np.array([[0, -1, 0], [0, -1, -1] / np.sqrt(2)])
    hits = bvh.intersect(np.array(origin), dirs)
    assert hits.t[0] == pytest.approx(2.0, abs=1e-9)
    assert hits.t[1] == pytest.approx(2 * np.sqrt(2), abs=1e-9)


def test_degenerate_mesh_rejected():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]])
    with pytest.raises(DegenerateMesh):
        P.render_erp_depth(TerrainMesh(v, [[0, 1, 2]]), (0, 1, 0), 16)


# -- tiling ------------------------------------------------------------------

def test_tile_origins_example():
    ts = P.tile_split(np.zeros((4, 4096, 1)), 1024, 128)
    assert [t.x_origin for t in ts.tiles] == [0, 896, 1792, 2688, 3584]
    wrapped = [c for c in ts.columns(4) if c < 3584]
    assert len(wrapped) == 512 and wrapped[0] == 0


def test_zero_overlap_partitions():
    ts = P.tile_split(np.zeros((2, 64, 1)), 16, 0)
    cols = np.concatenate([ts.columns(k) for k in range(len(ts.tiles))])
    assert sorted(cols.tolist()) == list(range(64))


def test_full_width_tile_identity():
    img = np.random.default_rng(0).random((8, 16, 3))
    ts = P.tile_split(img, 16, 4)
    assert len(ts.tiles) == 1
    assert np.array_equal(P.tile_merge(ts), img)


def test_bad_tiling():
    with pytest.raises(BadTiling):
        P.tile_split(np.zeros((2, 8, 1)), 4, 4)
    with pytest.raises(BadTiling):
        P.tile_split(np.zeros((2, 8, 1)), 16, 0)


def test_constant_tiles_blend_linearly():
    ts = P.tile_split(np.zeros((1, 12, 1)), 8, 4)
    ts.tiles[0].data[:] = 1.0
    ts.tiles[1].data[:] = 3.0
    ts.tiles = ts.tiles[:2]
    out = P.tile_merge(ts)[0, :, 0]
    # overlap columns 4..7 step between the two values
    ramp = out[4:8]
    assert np.all(np.diff(ramp) > 0)
    assert np.allclose(np.diff(ramp), np.diff(ramp)[0])


def test_coverage_gap():
    ts = P.tile_split(np.zeros((1, 12, 1)), 4, 0)
    ts.tiles = ts.tiles[:2]
    with pytest.raises(CoverageGap):
        P.tile_merge(ts)


@settings(max_examples=40, deadline=None)
@given(st.integers(8, 96), st.data())
def test_split_merge_round_trip(width, data):
    width -= width % 2
    tile = data.draw(st.integers(1, width))
    overlap = data.draw(st.integers(0, tile - 1))
    img = np.random.default_rng(width * 1000 + tile).random((width // 2, width, 2))
    ts = P.tile_split(img, tile, overlap)
    assert np.array_equal(P.tile_merge(ts), img)
    total = np.zeros(width)
    for k, w in enumerate(P.tile_weights(ts)):
        np.add.at(total, ts.columns(k), w)
    assert np.max(np.abs(total - 1)) < 1e-6


def test_wrap_columns_differ_still_exact():
    img = np.zeros((4, 8, 1))
    img[:, 0] = 1.0
    img[:, -1] = -1.0
    assert np.array_equal(P.tile_merge(P.tile_split(img, 5, 2)), img)


# -- cubemap -----------------------------------------------------------------

def test_constant_face():
    face = P.erp_to_cubemap_face(np.full((8, 16, 1), 0.25), "+X", 6)
    assert np.all(face.data == 0.25)


def test_face_centre_samples_forward():
    uv = P.pixel_uv(64, 32)
    img = np.concatenate([uv, np.zeros((32, 64, 1))], axis=2)
    face = P.erp_to_cubemap_face(img, "-Z", 9)
    assert np.allclose(face.data[4, 4], P.sample_bilinear(img, [0.5, 0.5]), atol=1e-12)


def test_face_bases_right_handed():
    for fwd, right, up in P.FACE_BASIS.values():
        assert np.array_equal(np.cross(right, up), -np.asarray(fwd))


@pytest.mark.parametrize("face", sorted(P.FACE_BASIS))
def test_face_corners_within_one_texel(face):
    res = 16
    width = 64
    corners = P.face_directions(face, res, corners=True)
    centres = P.face_directions(face, res)
    # each texel centre lies inside the cone spanned by its four corners
    ang = np.arccos(np.clip(np.sum(corners[:-1, :-1] * centres, -1), -1, 1))
    texel = 2 * np.arctan(1.0 / res) * np.sqrt(2)
    assert np.max(ang) <= texel
    uv = P.dir_to_erp_uv(corners)
    back = P.erp_uv_to_dir(uv)
    assert np.max(np.linalg.norm(back - corners, axis=-1)) < 1.0 / width


def test_minus_y_face_points_down():
    d = P.face_directions("-Y", 5)
    assert np.all(d[..., 1] < 0)
    assert np.allclose(d[2, 2], [0, -1, 0])
