import numpy as np
import pytest

from vrvc import autodiff as ad
from vrvc.autodiff import Tensor, grad_check
from vrvc.errors import DimensionError
from vrvc.field import (
    AXIS_PAIRS,
    FrameField,
    ResidualField,
    bilinear_sample,
    compensate,
    project,
    query_feature,
    resample_field,
    trilinear_sample,
)

UNIT_BBOX = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])


def random_field(rng, c=2, pres=4, gres=4, bbox=UNIT_BBOX) -> FrameField:
    f = FrameField.zeros(c, pres, gres, bbox)
    for name in AXIS_PAIRS:
        f.planes[name][:] = rng.normal(size=f.planes[name].shape)
    f.grid[:] = rng.normal(size=f.grid.shape)
    return f


# -- project -------------------------------------------------------------------


def test_project_selects_coordinates():
    x = np.array([0.2, 0.4, 0.6])
    assert np.allclose(project(x, "xy", UNIT_BBOX), [0.2, 0.4])
    assert np.allclose(project(x, "xz", UNIT_BBOX), [0.2, 0.6])


def test_project_center_of_symmetric_bbox():
    bbox = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    assert np.allclose(project(np.zeros(3), "yz", bbox), [0.5, 0.5])


def test_project_clamps():
    assert np.allclose(project(np.array([2.0, -1.0, 0.5]), "xy", UNIT_BBOX), [1.0, 0.0])


# -- bilinear ------------------------------------------------------------------


def test_bilinear_node_exact(rng):
    plane = rng.normal(size=(3, 5, 5))
    for j in range(5):
        for i in range(5):
            uv = np.array([i / 4.0, j / 4.0])
            out = bilinear_sample(Tensor(plane), uv)
            assert np.array_equal(out.data, plane[:, j, i])


def test_bilinear_constant_plane():
    plane = np.full((2, 4, 4), 3.25)
    out = bilinear_sample(Tensor(plane), np.array([[0.33, 0.77], [0.5, 0.1]]))
    assert np.allclose(out.data, 3.25)


def test_bilinear_2x2_corner_case():
    # corners f00=0, f10=1, f01=2, f11=3 at uv=(0.25, 0.75) -> 1.75
    plane = np.array([[[0.0, 1.0], [2.0, 3.0]]])
    out = bilinear_sample(Tensor(plane), np.array([0.25, 0.75]))
    assert abs(out.data[0] - 1.75) < 1e-15


def test_bilinear_within_node_range(rng):
    plane = rng.normal(size=(1, 6, 6))
    uv = rng.uniform(0, 1, size=(200, 2))
    out = bilinear_sample(Tensor(plane), uv).data
    assert out.min() >= plane.min() - 1e-12 and out.max() <= plane.max() + 1e-12


def test_bilinear_gradients(rng):
    plane = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True, name="plane")
    uv = Tensor(rng.uniform(0.15, 0.85, size=(6, 2)), requires_grad=True, name="uv")
    proj = Tensor(rng.normal(size=(6, 2)))
    report = grad_check(lambda: ad.tsum(ad.mul(bilinear_sample(plane, uv), proj)), [plane, uv], tolerance=1e-4)
    assert report["passed"], report


# -- trilinear -----------------------------------------------------------------


def test_trilinear_node_exact(rng):
    grid = rng.normal(size=(3, 3, 3))
    for idx in np.ndindex(3, 3, 3):
        x = np.array(idx) / 2.0
        out = trilinear_sample(Tensor(grid), x, UNIT_BBOX)
        assert np.array_equal(out.data, grid[idx])


def test_trilinear_constant():
    grid = np.full((4, 4, 4), -1.5)
    out = trilinear_sample(Tensor(grid), np.array([[0.3, 0.7, 0.2]]), UNIT_BBOX)
    assert np.allclose(out.data, -1.5)


def test_trilinear_matches_8corner_oracle(rng):
    grid = rng.normal(size=(3, 3, 3))
    pts = rng.uniform(0, 1, size=(20, 3))
    out = trilinear_sample(Tensor(grid), pts, UNIT_BBOX).data
    for n, p in enumerate(pts):
        x, y, z = p * 2.0
        i0, j0, k0 = int(min(np.floor(x), 1)), int(min(np.floor(y), 1)), int(min(np.floor(z), 1))
        fx, fy, fz = x - i0, y - j0, z - k0
        expect = 0.0
        for a in (0, 1):
            for b in (0, 1):
                for c in (0, 1):
                    wx = fx if a else 1 - fx
                    wy = fy if b else 1 - fy
                    wz = fz if c else 1 - fz
                    expect += grid[i0 + a, j0 + b, k0 + c] * wx * wy * wz
        assert abs(out[n] - expect) < 1e-12


def test_trilinear_gradient(rng):
    grid = Tensor(rng.normal(size=(3, 3, 3)), requires_grad=True, name="grid")
    pts = rng.uniform(0.1, 0.9, size=(5, 3))
    proj = Tensor(rng.normal(size=5))
    report = grad_check(lambda: ad.tsum(ad.mul(trilinear_sample(grid, pts, UNIT_BBOX), proj)), [grid], tolerance=1e-4)
    assert report["passed"], report


# -- query_feature ---------------------------------------------------------------


def test_query_feature_constant_planes():
    f = FrameField.zeros(2, 4, 4, UNIT_BBOX)
    for name in AXIS_PAIRS:
        f.planes[name][:] = 1.0
    out = query_feature(f, np.array([0.3, 0.6, 0.2]))
    assert out.data.shape == (6,)
    assert np.allclose(out.data, 1.0)


def test_query_feature_zero_except_xy(rng):
    f = FrameField.zeros(2, 4, 4, UNIT_BBOX)
    f.planes["xy"][:] = rng.uniform(1.0, 2.0, size=(2, 4, 4))
    out = query_feature(f, np.array([0.3, 0.6, 0.2])).data
    assert np.all(out[:2] != 0)
    assert np.all(out[2:] == 0)


def test_query_feature_matches_per_plane_oracle(rng):
    f = random_field(rng)
    pts = rng.uniform(0, 1, size=(10, 3))
    out = query_feature(f, pts).data
    for n, x in enumerate(pts):
        parts = []
        for name in AXIS_PAIRS:
            uv = project(x, name, f.bbox)
            parts.append(bilinear_sample(Tensor(f.planes[name]), uv).data)
        assert np.array_equal(out[n], np.concatenate(parts))


def test_query_feature_linearity(rng):
    fa, fb = random_field(rng), random_field(rng)
    alpha, beta = 0.6, -1.2
    mix = FrameField(
        {k: alpha * fa.planes[k] + beta * fb.planes[k] for k in AXIS_PAIRS},
        alpha * fa.grid + beta * fb.grid,
        UNIT_BBOX.copy(),
        fa.channels,
    )
    pts = rng.uniform(0, 1, size=(8, 3))
    lhs = query_feature(mix, pts).data
    rhs = alpha * query_feature(fa, pts).data + beta * query_feature(fb, pts).data
    assert np.allclose(lhs, rhs, atol=1e-12)


# -- compensate -------------------------------------------------------------------


def test_compensate_zero_residual(rng):
    prev = random_field(rng)
    zero = ResidualField.zeros(prev.channels, 4, 4, UNIT_BBOX)
    out = compensate(prev, zero)
    for name in AXIS_PAIRS:
        assert np.array_equal(out.planes[name], prev.planes[name])
    assert np.array_equal(out.grid, prev.grid)


def test_compensate_additive():
    prev = FrameField.zeros(1, 4, 4, UNIT_BBOX)
    res = ResidualField.zeros(1, 4, 4, UNIT_BBOX)
    for name in AXIS_PAIRS:
        prev.planes[name][:] = 1.0
        res.planes[name][:] = 0.5
    prev.grid[:] = 1.0
    res.grid[:] = 0.5
    out = compensate(prev, res)
    assert np.all(out.planes["xy"] == 1.5) and np.all(out.grid == 1.5)


def test_compensate_inverse_relation(rng):
    # dyadic lattice values add without rounding, so the inverse is exact
    prev, res = random_field(rng), random_field(rng)
    for f in (prev, res):
        for name in AXIS_PAIRS:
            f.planes[name][:] = rng.integers(-64, 64, size=f.planes[name].shape) / 16.0
        f.grid[:] = rng.integers(-64, 64, size=f.grid.shape) / 16.0
    out = compensate(prev, res)
    for name in AXIS_PAIRS:
        assert np.array_equal(out.planes[name] - prev.planes[name], res.planes[name])
    assert np.array_equal(out.grid - prev.grid, res.grid)


def test_compensate_chained_associativity(rng):
    f, r2, r3 = random_field(rng), random_field(rng), random_field(rng)
    lhs = compensate(compensate(f, r2), r3)
    rhs_planes = {k: f.planes[k] + r2.planes[k] + r3.planes[k] for k in AXIS_PAIRS}
    for name in AXIS_PAIRS:
        assert np.allclose(lhs.planes[name], rhs_planes[name], atol=1e-12)


def test_compensate_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        compensate(random_field(rng, pres=4), random_field(rng, pres=8))


# -- resample ---------------------------------------------------------------------


def test_resample_constant_field():
    f = FrameField.zeros(1, 4, 4, UNIT_BBOX)
    for name in AXIS_PAIRS:
        f.planes[name][:] = 2.5
    f.grid[:] = 2.5
    down = resample_field(f, "down2")
    up = resample_field(f, "up2")
    assert down.planes["xy"].shape == (1, 2, 2) and np.all(down.planes["xy"] == 2.5)
    assert np.all(down.grid == 2.5) and down.grid.shape == (2, 2, 2)
    assert up.planes["xy"].shape == (1, 8, 8) and np.all(up.planes["xy"] == 2.5)
    assert np.all(up.grid == 2.5)


def test_down2_is_2x2_mean():
    f = FrameField.zeros(1, 4, 4, UNIT_BBOX)
    f.planes["xy"][0] = np.arange(16, dtype=np.float64).reshape(4, 4)
    down = resample_field(f, "down2")
    # hand-computed means of each 2x2 block of arange(16)
    assert np.array_equal(down.planes["xy"][0], [[2.5, 4.5], [10.5, 12.5]])


def test_up2_preserves_nodes_at_even_indices(rng):
    f = random_field(rng, c=1, pres=4, gres=4)
    up = resample_field(f, "up2")
    assert np.array_equal(up.planes["xy"][:, 0::2, 0::2], f.planes["xy"])
    assert np.array_equal(up.grid[0::2, 0::2, 0::2], f.grid)


def test_down2_odd_extent_raises():
    f = FrameField.zeros(1, 5, 4, UNIT_BBOX)
    with pytest.raises(DimensionError):
        resample_field(f, "down2")


def test_resample_preserves_residual_type(rng):
    r = ResidualField.zeros(1, 4, 4, UNIT_BBOX)
    assert isinstance(resample_field(r, "up2"), ResidualField)
