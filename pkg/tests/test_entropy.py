import numpy as np
import pytest

from vrvc import autodiff as ad
from vrvc import config
from vrvc.autodiff import Tensor, grad_check
from vrvc.entropy import (
    C_Z,
    SIGMA_MIN,
    CodecModel,
    RatePoint,
    analysis_transform,
    context_transform,
    entropy_params,
    locations_flat,
    quantize,
    rate_estimate,
    synthesis_transform,
)
from vrvc.field import AXIS_PAIRS, ResidualField

BBOX = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])


def make_residual(rng, c=2, pres=4, gres=4, scale=1.0) -> ResidualField:
    r = ResidualField.zeros(c, pres, gres, BBOX)
    for name in AXIS_PAIRS:
        r.planes[name][:] = rng.normal(size=r.planes[name].shape) * scale
    r.grid[:] = rng.normal(size=r.grid.shape) * scale
    return r


def make_model(rng, c=2) -> CodecModel:
    return CodecModel(c, rng)


# -- analysis / synthesis --------------------------------------------------------


def test_analysis_zero_residual_zero_bias(rng):
    model = make_model(rng)
    for w, b in model.analysis.layers:
        b.data[:] = 0
    model.grid_in[1].data[:] = 0
    r = ResidualField.zeros(2, 4, 4, BBOX)
    y = analysis_transform(r, model)
    for name, t in y.items():
        assert np.all(t.data == 0), name


def test_identity_initialized_transform_roundtrip(rng):
    model = make_model(rng)
    model.identity_init_transforms()
    r = make_residual(rng)
    y = analysis_transform(r, model)
    # identity init: latent equals the residual channels on the plane path
    for name in AXIS_PAIRS:
        assert np.allclose(y[name].data[0], r.planes[name], atol=1e-12)
    rec = synthesis_transform(y, model, r.grid.shape)
    for name in AXIS_PAIRS:
        assert np.array_equal(rec[name].data, r.planes[name])


def test_analysis_synthesis_gradients(rng):
    model = make_model(rng, c=1)
    r = make_residual(rng, c=1, pres=2, gres=2)
    planes = {name: Tensor(r.planes[name], requires_grad=True, name=name) for name in AXIS_PAIRS}
    grid = Tensor(r.grid, requires_grad=True, name="grid")
    proj = {name: rng.normal(size=(1, 2, 2)) for name in AXIS_PAIRS}
    proj["grid"] = rng.normal(size=(2, 2, 2))

    def f():
        stacks = dict(planes)
        stacks["grid"] = grid
        y = analysis_transform(stacks, model)
        rec = synthesis_transform(y, model, r.grid.shape)
        total = ad.tsum(ad.mul(rec["grid"], Tensor(proj["grid"])))
        for name in AXIS_PAIRS:
            total = ad.add(total, ad.tsum(ad.mul(rec[name], Tensor(proj[name]))))
        return total

    params = [*planes.values(), grid, *model.analysis.params(), *model.synthesis.params(), *model.grid_in, *model.grid_out]
    report = grad_check(f, params, tolerance=1e-4)
    assert report["passed"], report


# -- context transform -------------------------------------------------------------


def test_context_zero_latent_zero_bias(rng):
    model = make_model(rng)
    for k, b in model.cnn:
        b.data[:] = 0
    y = {name: Tensor(np.zeros((1, 2, 4, 4))) for name in AXIS_PAIRS}
    y["grid"] = Tensor(np.zeros((4, 2, 4, 4)))
    z = context_transform(y, model)
    for name, t in z.items():
        assert np.all(t.data == 0)


def test_context_delta_kernel_stack_passthrough(rng):
    model = make_model(rng, c=4)
    # delta kernels everywhere: z equals the first C_Z channels of y
    for i, (k, b) in enumerate(model.cnn):
        k.data[:] = 0
        b.data[:] = 0
        cout, cin = k.data.shape[:2]
        for o in range(cout):
            k.data[o, o % cin, 1, 1] = 1.0
    y = {name: Tensor(rng.uniform(0.5, 1.5, size=(1, 4, 4, 4))) for name in AXIS_PAIRS}
    y["grid"] = Tensor(rng.uniform(0.5, 1.5, size=(2, 4, 4, 4)))
    z = context_transform(y, model)
    for name in z:
        assert np.allclose(z[name].data, y[name].data[:, :C_Z], atol=1e-12)


def test_context_matches_naive_stack(rng):
    from tests.test_autodiff import naive_conv3x3

    model = make_model(rng, c=2)
    y = {"xy": Tensor(rng.normal(size=(1, 2, 4, 4)))}
    z = context_transform({**y, "yz": y["xy"], "xz": y["xy"], "grid": Tensor(rng.normal(size=(2, 2, 4, 4)))}, model)["xy"]
    x = y["xy"].data[0]
    for i, (k, b) in enumerate(model.cnn):
        x = naive_conv3x3(k.data, x) + b.data[:, None, None]
        if i < 4:
            x = np.maximum(x, 0)
    assert np.array_equal(z.data[0], x)


# -- quantize ----------------------------------------------------------------------


def test_quantize_examples():
    y = Tensor([2.3])
    out, q = quantize(y, 1.0, "infer")
    assert q[0] == 2 and out.data[0] == 2.0
    out, q = quantize(Tensor([26.0]), 10.0, "infer")
    assert q[0] == 3 and out.data[0] == 30.0
    out, q = quantize(Tensor([-1.3]), 0.5, "infer")
    assert q[0] == -3 and out.data[0] == -1.5


def test_quantize_train_mode_ste(rng):
    y = Tensor(rng.normal(size=5), requires_grad=True)
    out, q = quantize(y, 0.7, "train")
    assert q is None
    ad.tsum(out).backward()
    assert np.array_equal(y.grad, np.ones(5))


def test_quantize_rejects_nonpositive_step():
    from vrvc.errors import DimensionError

    with pytest.raises(DimensionError):
        quantize(Tensor([1.0]), 0.0, "infer")


# -- entropy params ------------------------------------------------------------------


def test_entropy_params_zero_weights(rng):
    model = make_model(rng)
    for p in model.entropy_mlp.params():
        p.data[:] = 0
    z = Tensor(rng.normal(size=(6, C_Z)))
    mu, sig = entropy_params(z, 2.0, model)
    assert np.all(mu.data == 0)
    assert np.allclose(sig.data, SIGMA_MIN + np.log(2.0))


def test_entropy_params_translation_invariance(rng):
    model = make_model(rng)
    z = Tensor(np.tile(rng.normal(size=(1, C_Z)), (8, 1)))
    mu, sig = entropy_params(z, 1.5, model)
    assert np.allclose(mu.data, mu.data[0], atol=1e-12)
    assert np.allclose(sig.data, sig.data[0], atol=1e-12)


def test_entropy_params_gradients(rng):
    model = make_model(rng, c=1)
    z = Tensor(rng.normal(size=(3, C_Z)), requires_grad=True, name="z")
    pm = Tensor(rng.normal(size=(3, 1)))
    ps = Tensor(rng.normal(size=(3, 1)))

    def f():
        mu, sig = entropy_params(z, 1.7, model)
        return ad.add(ad.tsum(ad.mul(mu, pm)), ad.tsum(ad.mul(sig, ps)))

    report = grad_check(f, [z, *model.entropy_mlp.params()], tolerance=1e-4)
    assert report["passed"], report


# -- rate estimate ---------------------------------------------------------------------


def test_rate_estimate_certain_symbol_near_zero_bits():
    mu = Tensor(np.zeros((4, 1)))
    sigma = Tensor(np.full((4, 1), SIGMA_MIN))
    q = np.zeros((4, 1))
    bits = rate_estimate(q, mu, sigma, 1.0, "infer")
    assert bits.item() < 1e-6


def test_rate_estimate_coin_case():
    s = 0.5 / 0.6744897501960817
    mu = Tensor(np.zeros((100, 1)))
    sigma = Tensor(np.full((100, 1), s))
    bits = rate_estimate(np.zeros((100, 1)), mu, sigma, 1.0, "infer")
    assert abs(bits.item() - 100.0) < 1e-6


def test_rate_estimate_matches_direct_sum(rng):
    from vrvc.rangecoder import symbol_probability

    mu_np = rng.normal(size=(50, 1))
    sig_np = rng.uniform(0.2, 2.0, size=(50, 1))
    a = 1.3944
    # symbols near the predicted mean keep probabilities representable
    q = np.round(mu_np / a + rng.integers(-2, 3, size=(50, 1)) * (sig_np / a))
    bits = rate_estimate(q.astype(np.float64), Tensor(mu_np), Tensor(sig_np), a, "infer")
    direct = -np.sum(np.log2(symbol_probability(q, mu_np, sig_np, a)))
    assert abs(bits.item() - direct) < 1e-9


def test_rate_gradient_flows_to_all_inputs(rng):
    model = make_model(rng, c=1)
    rp = RatePoint.create(0, 0.01, 1.5)
    y = Tensor(rng.normal(size=(5, 1)), requires_grad=True, name="y")
    z = Tensor(rng.normal(size=(5, C_Z)), requires_grad=True, name="z")
    noise = rng.uniform(-0.5, 0.5, size=(5, 1))

    def f():
        a_t = rp.a_tensor()
        mu, sig = entropy_params(z, a_t, model)
        return rate_estimate(y, mu, sig, a_t, "train", noise=noise)

    report = grad_check(f, [y, z, rp.a_raw, *model.entropy_mlp.params()], tolerance=1e-4)
    assert report["passed"], report
    f().backward()
    assert rp.a_raw.grad is not None and abs(rp.a_raw.grad[0]) > 0


def test_locations_flat_layout(rng):
    t = Tensor(rng.normal(size=(2, 3, 2, 2)))
    flat = locations_flat(t)
    assert flat.data.shape == (8, 3)
    assert np.array_equal(flat.data[0], t.data[0, :, 0, 0])
    assert np.array_equal(flat.data[1], t.data[0, :, 0, 1])
