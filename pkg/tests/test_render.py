import numpy as np
import pytest

from vrvc import autodiff as ad
from vrvc.autodiff import Mlp, Tensor, grad_check
from vrvc.errors import DimensionError
from vrvc.field import AXIS_PAIRS, FrameField
from vrvc.render import (
    Camera,
    RenderSettings,
    Ray,
    accumulate,
    decode_color,
    dir_encoding,
    generate_rays,
    look_at,
    march,
    render_image,
    render_rays,
    sample_count,
)

BBOX = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


def make_camera(eye=(0.0, 0.0, -4.0), target=(0.0, 0.0, 0.0), focal=50.0, size=9):
    rot = look_at(eye, target)
    c = (size - 1) / 2.0
    return Camera(focal, c, c, rot, np.asarray(eye, dtype=np.float64), size, size).validate()


def make_phi(rng, channels=2, hidden=(8, 8)):
    return Mlp.create([3 * channels + 27, *hidden, 3], rng, name="phi")


def constant_field(raw_density, feature=1.0, channels=2, pres=4, gres=4):
    f = FrameField.zeros(channels, pres, gres, BBOX)
    for name in AXIS_PAIRS:
        f.planes[name][:] = feature
    f.grid[:] = raw_density
    return f


# -- cameras / rays -------------------------------------------------------------


def test_look_at_is_proper_rotation():
    rot = look_at((3.0, 2.0, -5.0), (0.0, 0.0, 0.0))
    assert np.allclose(rot.T @ rot, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(rot) - 1.0) < 1e-12


def test_principal_point_ray_is_optical_axis():
    cam = make_camera()
    (ray,) = generate_rays(cam, [(4, 4)])
    axis = np.array([0.0, 0.0, 0.0]) - cam.eye
    axis = axis / np.linalg.norm(axis)
    assert np.allclose(ray.direction, axis, atol=1e-12)
    assert abs(np.linalg.norm(ray.direction) - 1.0) < 1e-9


def test_symmetric_pixels_mirror_in_x():
    cam = make_camera(eye=(0.0, 0.0, -4.0))
    left, right = generate_rays(cam, [(2, 4), (6, 4)])
    assert abs(left.direction[0] + right.direction[0]) < 1e-12
    assert np.allclose(left.direction[1:], right.direction[1:], atol=1e-12)


def test_corner_pixel_matches_pinhole_formula():
    cam = make_camera()
    (ray,) = generate_rays(cam, [(0, 0)])
    d_cam = np.array([(0 - cam.cx) / cam.focal, (0 - cam.cy) / cam.focal, 1.0])
    expected = cam.rotation @ d_cam
    expected /= np.linalg.norm(expected)
    assert np.allclose(ray.direction, expected, atol=1e-14)


def test_out_of_bounds_pixel_raises():
    cam = make_camera()
    with pytest.raises(DimensionError):
        generate_rays(cam, [(9, 0)])


# -- march ------------------------------------------------------------------------


def test_march_miss_returns_empty(rng):
    field = constant_field(5.0)
    ray = Ray(np.array([0.0, 0.0, -4.0]), np.array([0.0, 0.0, -1.0]), (0, 0))
    samples = march(ray, field, RenderSettings.for_bbox(BBOX))
    assert samples.count == 0


def test_march_all_samples_skipped_when_density_floor():
    field = constant_field(-10.0)  # softplus(-12) well below the skip threshold
    ray = Ray(np.array([0.0, 0.0, -4.0]), np.array([0.0, 0.0, 1.0]), (0, 0))
    samples = march(ray, field, RenderSettings.for_bbox(BBOX))
    assert samples.count == 0


def test_march_retained_equals_noskip_minus_below_threshold(rng):
    field = constant_field(0.0)
    field.grid[:] = rng.normal(loc=-2.0, scale=4.0, size=field.grid.shape)
    ray = Ray(np.array([0.3, -0.2, -4.0]), np.array([0.02, 0.01, 1.0]) / np.linalg.norm([0.02, 0.01, 1.0]), (0, 0))
    st = RenderSettings.for_bbox(BBOX)
    skipped = march(ray, field, st)
    st0 = RenderSettings(st.step, skip_threshold=0.0)
    full = march(ray, field, st0)
    below = int(np.sum(full.sigma < st.skip_threshold))
    assert skipped.count == full.count - below


def test_sample_count_formula():
    assert sample_count(0.0, 1.0, 1.0) == 1
    assert sample_count(0.0, 2.0, 1.0) == 2
    assert sample_count(0.0, 0.4, 1.0) == 0
    assert sample_count(1.0, 0.5, 1.0) == 0


# -- accumulate --------------------------------------------------------------------


def _sample_set(sigmas, deltas, feats):
    from vrvc.render import SampleSet

    sigmas = np.asarray(sigmas, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    feats = np.asarray(feats, dtype=np.float64)
    sd = sigmas * deltas
    trans = np.exp(-(np.cumsum(sd) - sd))
    return SampleSet(np.zeros((len(sigmas), 3)), deltas, sigmas, sigmas, feats, trans, len(sigmas))


def test_accumulate_zero_density():
    s = _sample_set([0.0, 0.0], [0.1, 0.1], np.ones((2, 4)))
    f, op = accumulate(s)
    assert np.all(f == 0) and op == 0.0


def test_accumulate_single_sample_ln2():
    # sigma*delta = ln 2 -> alpha = 0.5
    s = _sample_set([np.log(2.0)], [1.0], np.ones((1, 4)))
    f, op = accumulate(s)
    assert np.allclose(f, 0.5) and abs(op - 0.5) < 1e-12


def test_accumulate_two_samples_front_to_back():
    s = _sample_set([np.log(2.0), np.log(2.0)], [1.0, 1.0], np.ones((2, 4)))
    f, op = accumulate(s)
    assert np.allclose(f, 0.75) and abs(op - 0.75) < 1e-12


def test_transmittance_invariants(rng):
    sig = rng.uniform(0.0, 3.0, size=12)
    s = _sample_set(sig, np.full(12, 0.2), rng.normal(size=(12, 4)))
    assert s.transmittances[0] == 1.0
    assert np.all(np.diff(s.transmittances) <= 1e-15)
    assert np.all((s.transmittances >= 0) & (s.transmittances <= 1))
    sd = sig * 0.2
    w = s.transmittances * (1 - np.exp(-sd))
    t_end = np.exp(-np.sum(sd))
    assert abs(w.sum() + t_end - 1.0) < 1e-6


def test_accumulate_linear_in_features(rng):
    sig = rng.uniform(0.0, 2.0, size=6)
    fa = rng.normal(size=(6, 4))
    fb = rng.normal(size=(6, 4))
    f1, _ = accumulate(_sample_set(sig, np.full(6, 0.3), fa))
    f2, _ = accumulate(_sample_set(sig, np.full(6, 0.3), fb))
    f12, _ = accumulate(_sample_set(sig, np.full(6, 0.3), 2.0 * fa - 0.5 * fb))
    assert np.allclose(f12, 2.0 * f1 - 0.5 * f2, atol=1e-12)


# -- decode_color ------------------------------------------------------------------


def test_decode_zero_weight_phi_gives_half(rng):
    phi = make_phi(rng)
    for w, b in phi.layers:
        w.data[:] = 0
        b.data[:] = 0
    rgb = decode_color(np.zeros(6), np.array([0.0, 0.0, 1.0]), phi)
    assert np.allclose(rgb, 0.5)


def test_dir_encoding_zero_direction():
    enc = dir_encoding(np.zeros((1, 3)))[0]
    assert enc.shape == (27,)
    assert np.all(enc[:3] == 0)
    for j in range(4):
        sin_part = enc[3 + 6 * j : 6 + 6 * j]
        cos_part = enc[6 + 6 * j : 9 + 6 * j]
        assert np.all(sin_part == 0) and np.all(cos_part == 1)


def test_decode_gradient_wrt_feature(rng):
    phi = make_phi(rng)
    f = Tensor(rng.normal(size=(1, 6)), requires_grad=True, name="feat")
    d = rng.normal(size=(1, 3))
    d /= np.linalg.norm(d)
    proj = Tensor(rng.normal(size=(1, 3)))

    from vrvc.render import _decode_batch

    report = grad_check(lambda: ad.tsum(ad.mul(_decode_batch(f, d, phi), proj)), [f], tolerance=1e-4)
    assert report["passed"], report


# -- render_image ------------------------------------------------------------------


def test_empty_field_renders_background(rng):
    field = constant_field(-30.0)
    phi = make_phi(rng)
    cam = make_camera()
    st = RenderSettings.for_bbox(BBOX, background=(0.2, 0.4, 0.6))
    img, opac = render_image(field, phi, cam, st)
    assert np.all(opac == 0)
    assert np.allclose(img, np.array([0.2, 0.4, 0.6]), atol=0)


def test_render_is_deterministic(rng):
    field = constant_field(0.5)
    for name in AXIS_PAIRS:
        field.planes[name][:] = rng.normal(size=field.planes[name].shape)
    phi = make_phi(rng)
    cam = make_camera()
    st = RenderSettings.for_bbox(BBOX)
    img1, op1 = render_image(field, phi, cam, st)
    img2, op2 = render_image(field, phi, cam, st)
    assert np.array_equal(img1, img2) and np.array_equal(op1, op2)


def test_opaque_constant_feature_matches_single_decode(rng):
    field = constant_field(200.0, feature=0.7)
    phi = make_phi(rng)
    cam = make_camera()
    st = RenderSettings.for_bbox(BBOX, background=(0.0, 0.0, 0.0))
    img, opac = render_image(field, phi, cam, st)
    (ray,) = generate_rays(cam, [(4, 4)])
    expected = decode_color(np.full(6, 0.7), ray.direction, phi)
    assert abs(opac[4, 4] - 1.0) < 1e-12
    assert np.allclose(img[4, 4], expected, atol=1e-10)


def test_skip_threshold_zero_equals_noskip_oracle(rng):
    field = constant_field(0.0)
    field.grid[:] = rng.normal(size=field.grid.shape)
    for name in AXIS_PAIRS:
        field.planes[name][:] = rng.normal(size=field.planes[name].shape)
    ray = Ray(np.array([0.1, 0.2, -4.0]), np.array([0.0, 0.0, 1.0]), (0, 0))
    st0 = RenderSettings.for_bbox(BBOX, skip_threshold=0.0)
    got = march(ray, field, st0)

    # brute-force enumeration without any skip logic
    from vrvc.render import ray_bbox_span

    t0, t1 = ray_bbox_span(ray.origin[None], ray.direction[None], BBOX)
    n = sample_count(float(t0[0]), float(t1[0]), st0.step)
    assert got.count == n
    ts = t0[0] + (np.arange(n) + 0.5) * st0.step
    pts = ray.origin + ray.direction * ts[:, None]
    assert np.array_equal(got.positions, pts)
    fa, oa = accumulate(got)
    assert np.isfinite(fa).all() and 0 <= oa <= 1


def test_end_to_end_photometric_gradient(rng):
    # 4-ray micro scene at f64: d(loss)/d(plane and grid values) vs central FD
    field = FrameField.zeros(1, 2, 2, BBOX)
    planes = {name: Tensor(rng.normal(size=(1, 2, 2)) * 0.5, requires_grad=True, name=name) for name in AXIS_PAIRS}
    grid = Tensor(rng.normal(size=(2, 2, 2)) * 0.5, requires_grad=True, name="grid")
    phi = make_phi(rng, channels=1, hidden=(6,))
    cam = make_camera(size=3, focal=3.0)
    from vrvc.render import _pixel_directions

    pix = np.array([[0, 0], [2, 0], [1, 1], [2, 2]])
    dirs = _pixel_directions(cam, pix[:, 0].astype(float), pix[:, 1].astype(float))
    origins = np.broadcast_to(cam.eye, dirs.shape)
    target = rng.uniform(0, 1, size=(4, 3))
    st = RenderSettings(step=0.5, skip_threshold=0.0)

    def loss():
        rgb, _ = render_rays(origins, dirs, planes, grid, BBOX, phi, st)
        diff = ad.add(rgb, Tensor(-target))
        return ad.tmean(ad.tsum(ad.mul(diff, diff), axis=1))

    params = [*planes.values(), grid]
    report = grad_check(loss, params, tolerance=1e-4)
    assert report["passed"], report
