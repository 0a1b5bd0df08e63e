"""Learned transforms and entropy model for residual-field compression.

The residual's three feature planes go through a shared two-layer pointwise
MLP into the latent stack; the density grid takes the same pathway as a
stack of single-channel z-slices behind its own channel adapters.  A five
layer 3x3 CNN turns the latent into the context feature; a tiny per-location
MLP conditioned on the quantization step predicts the Gaussian parameters of
the quantized latent.  The context feature itself is coded with a factorized
zero-mean prior at unit step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Mlp, Tensor, conv3x3
from .errors import DimensionError
from .field import AXIS_PAIRS, FrameField, ResidualField

C_Z = 4
CNN_WIDTH = 8
ENTROPY_HIDDEN = 32
SIGMA_MIN = 1e-3
A_FLOOR = 0.1
PLANE_COMPONENTS = tuple(AXIS_PAIRS)
COMPONENTS = PLANE_COMPONENTS + ("grid",)


def softplus_inv(x: float) -> float:
    return float(np.log(np.expm1(x)))


@dataclass
class RatePoint:
    """One (lambda, a) pair; the quantization step is learnable above A_FLOOR."""

    index: int
    lam: float
    a_raw: Tensor

    @classmethod
    def create(cls, index: int, lam: float, a_init: float) -> "RatePoint":
        if lam <= 0 or a_init <= A_FLOOR:
            raise DimensionError(f"rate point {index}: need lambda > 0 and a > {A_FLOOR}")
        raw = Tensor([softplus_inv(a_init - A_FLOOR)], requires_grad=True, name=f"rate{index}.a_raw")
        return cls(index, float(lam), raw)

    def a_tensor(self) -> Tensor:
        return ad.add(A_FLOOR, ad.softplus(self.a_raw))

    def a_value(self) -> float:
        return float(A_FLOOR + np.logaddexp(0.0, self.a_raw.data[0]))


class CodecModel:
    """All learnable pieces of the residual codec."""

    def __init__(self, channels: int, rng: np.random.Generator):
        c = channels
        self.channels = c
        self.analysis = Mlp.create([c, 2 * c, c], rng, name="analysis")
        self.synthesis = Mlp.create([c, 2 * c, c], rng, name="synthesis")
        bound = 1.0
        self.grid_in = (
            Tensor(rng.uniform(-bound, bound, size=(1, c)), requires_grad=True, name="grid_in.w"),
            Tensor(np.zeros(c), requires_grad=True, name="grid_in.b"),
        )
        self.grid_out = (
            Tensor(rng.uniform(-1.0 / np.sqrt(c), 1.0 / np.sqrt(c), size=(c, 1)), requires_grad=True, name="grid_out.w"),
            Tensor(np.zeros(1), requires_grad=True, name="grid_out.b"),
        )
        widths = [c, CNN_WIDTH, CNN_WIDTH, CNN_WIDTH, CNN_WIDTH, C_Z]
        self.cnn = []
        for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
            kb = 1.0 / np.sqrt(cin * 9)
            self.cnn.append(
                (
                    Tensor(rng.uniform(-kb, kb, size=(cout, cin, 3, 3)), requires_grad=True, name=f"cnn.k{i}"),
                    Tensor(np.zeros(cout), requires_grad=True, name=f"cnn.b{i}"),
                )
            )
        self.entropy_mlp = Mlp.create([C_Z + 1, ENTROPY_HIDDEN, ENTROPY_HIDDEN, 2 * c], rng, name="entropy")
        self.z_scale_raw = Tensor(np.full(C_Z, softplus_inv(1.0)), requires_grad=True, name="z_scale_raw")

    def params(self) -> list[Tensor]:
        out = self.analysis.params() + self.synthesis.params()
        out += [*self.grid_in, *self.grid_out]
        for k, b in self.cnn:
            out += [k, b]
        out += self.entropy_mlp.params()
        out.append(self.z_scale_raw)
        return out

    def identity_init_transforms(self):
        """Make synthesis(analysis(x)) == x exactly (via the +-ReLU split)."""
        c = self.channels
        eye = np.eye(c)
        for mlp in (self.analysis, self.synthesis):
            w1, b1 = mlp.layers[0]
            w2, b2 = mlp.layers[1]
            w1.data[:] = np.concatenate([eye, -eye], axis=1)
            w2.data[:] = np.concatenate([eye, -eye], axis=0)
            b1.data[:] = 0
            b2.data[:] = 0

    def z_scales(self) -> Tensor:
        return ad.add(SIGMA_MIN, ad.softplus(self.z_scale_raw))

    # -- serialization ------------------------------------------------------

    def weight_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.params()]

    def load_weight_arrays(self, arrays: list[np.ndarray]):
        own = self.params()
        if len(own) != len(arrays):
            raise DimensionError(f"expected {len(own)} weight arrays, got {len(arrays)}")
        for p, a in zip(own, arrays):
            if p.data.shape != a.shape:
                raise DimensionError(f"weight {p.name}: shape {a.shape} != expected {p.data.shape}")
            p.data[:] = a.astype(p.data.dtype)


# -- transforms ---------------------------------------------------------------


def _pointwise(x: Tensor, mlp: Mlp) -> Tensor:
    """Apply an MLP across the channel axis of (B, C, H, W): per-location mixing."""
    b, c, h, w = x.data.shape
    flat = ad.reshape(ad.transpose(x, (0, 2, 3, 1)), (b * h * w, c))
    out = mlp(flat)
    cout = out.data.shape[1]
    return ad.transpose(ad.reshape(out, (b, h, w, cout)), (0, 3, 1, 2))


def _residual_stacks(residual: ResidualField | dict) -> dict[str, Tensor]:
    """Component name -> (B, C_in, H, W) tensor; grid becomes z-slices (Dz,1,Dx,Dy)."""
    if isinstance(residual, dict):
        stacks = dict(residual)
    else:
        stacks = {name: Tensor(residual.planes[name]) for name in PLANE_COMPONENTS}
        stacks["grid"] = Tensor(residual.grid)
    out = {}
    for name in PLANE_COMPONENTS:
        t = stacks[name]
        c, h, w = t.data.shape
        out[name] = ad.reshape(t, (1, c, h, w))
    g = stacks["grid"]
    dx, dy, dz = g.data.shape
    out["grid"] = ad.reshape(ad.transpose(g, (2, 0, 1)), (dz, 1, dx, dy))
    return out


def analysis_transform(residual, model: CodecModel) -> dict[str, Tensor]:
    """Residual components -> latent stack y (C_y channels per location)."""
    stacks = _residual_stacks(residual)
    y = {}
    for name in PLANE_COMPONENTS:
        y[name] = _pointwise(stacks[name], model.analysis)
    g = stacks["grid"]
    b, _, h, w = g.data.shape
    flat = ad.reshape(ad.transpose(g, (0, 2, 3, 1)), (b * h * w, 1))
    adapted = ad.add(ad.matmul(flat, model.grid_in[0]), model.grid_in[1])
    lat = model.analysis(adapted)
    y["grid"] = ad.transpose(ad.reshape(lat, (b, h, w, model.channels)), (0, 3, 1, 2))
    return y


def synthesis_transform(y_hat: dict[str, Tensor], model: CodecModel, grid_shape: tuple) -> dict[str, Tensor]:
    """Latent stack -> reconstructed residual components (planes + grid)."""
    out = {}
    for name in PLANE_COMPONENTS:
        rec = _pointwise(y_hat[name], model.synthesis)
        b, c, h, w = rec.data.shape
        out[name] = ad.reshape(rec, (c, h, w))
    g = y_hat["grid"]
    b, cy, h, w = g.data.shape
    flat = ad.reshape(ad.transpose(g, (0, 2, 3, 1)), (b * h * w, cy))
    rec = model.synthesis(flat)
    scalar = ad.add(ad.matmul(rec, model.grid_out[0]), model.grid_out[1])
    slices = ad.reshape(scalar, (b, h, w))
    out["grid"] = ad.transpose(slices, (1, 2, 0))
    if out["grid"].data.shape != tuple(grid_shape):
        raise DimensionError(f"grid reconstruction {out['grid'].data.shape} != {tuple(grid_shape)}")
    return out


def context_transform(y: dict[str, Tensor], model: CodecModel) -> dict[str, Tensor]:
    """Five 3x3 conv layers (ReLU between) refine y into the context stack z."""
    if len(model.cnn) != 5:
        raise DimensionError("context transform requires exactly five conv layers")
    z = {}
    for name, t in y.items():
        h = t
        for i, (k, bias) in enumerate(model.cnn):
            h = conv3x3(h, k)
            h = ad.add(h, ad.reshape(bias, (1, bias.data.shape[0], 1, 1)))
            if i < len(model.cnn) - 1:
                h = ad.relu(h)
        z[name] = h
    return z


def quantize(y: Tensor, a, mode: str):
    """round(y/a)*a.  'train' keeps the straight-through gradient on the value
    path; 'infer' also returns the integer symbols."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    a_val = a.data if isinstance(a, Tensor) else np.asarray(a)
    if np.any(a_val <= 0):
        raise DimensionError("quantization step must be positive")
    if mode == "train":
        return ad.ste_round_scaled(y, a), None
    q = ad.round_half_away(np.asarray(y.data, dtype=np.float64) / float(a_val)).astype(np.int64)
    y_hat = Tensor(q.astype(np.float64) * float(a_val), dtype=y.data.dtype)
    return y_hat, q


def entropy_params(z_hat_flat: Tensor, a, model: CodecModel):
    """Per-location Gaussian parameters of y-hat given the context and step.

    z_hat_flat: (N, C_Z).  Returns (mu, sigma') each (N, C_y); sigma' is
    floored at SIGMA_MIN.
    """
    n = z_hat_flat.data.shape[0]
    a_t = a if isinstance(a, Tensor) else Tensor(np.asarray([float(a)]))
    log_a = ad.log(a_t)
    col = ad.mul(Tensor(np.ones((n, 1), dtype=z_hat_flat.data.dtype)), ad.reshape(log_a, (1, 1)))
    out = model.entropy_mlp(ad.concat([z_hat_flat, col], axis=1))
    cy = model.channels
    mu = out[:, :cy]
    sigma = ad.add(SIGMA_MIN, ad.softplus(out[:, cy:]))
    return mu, sigma


def locations_flat(t: Tensor) -> Tensor:
    """(B, C, H, W) -> (B*H*W, C): location-major, channel-minor layout."""
    b, c, h, w = t.data.shape
    return ad.reshape(ad.transpose(t, (0, 2, 3, 1)), (b * h * w, c))


def entropy_params_batch(z_flat: Tensor, a_tensors: list[Tensor], model: CodecModel):
    """entropy_params evaluated for several quantization steps in one pass.

    The first layer's context product is shared across steps; only the
    log-step contribution differs.  Returns (mu, sigma') of shape (R, N, C_y).
    """
    n = z_flat.data.shape[0]
    r = len(a_tensors)
    (w1, b1), (w2, b2), (w3, b3) = model.entropy_mlp.layers
    hidden = w1.data.shape[1]
    base = ad.add(ad.matmul(z_flat, w1[:C_Z]), b1)
    log_a = ad.concat([ad.reshape(ad.log(a), (1, 1)) for a in a_tensors], axis=0)
    shift = ad.matmul(log_a, w1[C_Z : C_Z + 1])
    h1 = ad.relu(ad.add(ad.reshape(base, (1, n, hidden)), ad.reshape(shift, (r, 1, hidden))))
    h2 = ad.relu(ad.add(ad.matmul(ad.reshape(h1, (r * n, hidden)), w2), b2))
    out = ad.add(ad.matmul(h2, w3), b3)
    out = ad.reshape(out, (r, n, out.data.shape[1]))
    cy = model.channels
    mu = out[:, :, :cy]
    sigma = ad.add(SIGMA_MIN, ad.softplus(out[:, :, cy:]))
    return mu, sigma


_LN2 = float(np.log(2.0))


def rate_bits(values: Tensor, mu: Tensor, sigma: Tensor, a, floor: float = 1e-12) -> Tensor:
    """Differentiable code length in bits of `values` (scaled-domain symbols).

    values = y/a + noise in train mode, or the frozen integer symbols.
    mu/sigma are in the unscaled (y-hat) domain and get divided by a here,
    which is the path through which the step learns.
    """
    a_t = a if isinstance(a, Tensor) else Tensor(np.asarray([float(a)]))
    m = ad.div(mu, a_t)
    s = ad.div(sigma, a_t)
    upper = ad.div(ad.add(ad.add(values, 0.5), ad.mul(m, -1.0)), s)
    lower = ad.div(ad.add(ad.add(values, -0.5), ad.mul(m, -1.0)), s)
    p = ad.add(ad.gauss_cdf(upper), ad.mul(ad.gauss_cdf(lower), -1.0))
    p = ad.clip_min(p, floor)
    return ad.mul(ad.tsum(ad.log(p)), -1.0 / _LN2)


def rate_estimate(y_or_q, mu, sigma, a, mode: str, noise: np.ndarray | None = None) -> Tensor:
    """Expected bits of the quantized latent under the predicted Gaussian.

    train mode relaxes rounding with additive uniform noise of width 1 on the
    scaled values; infer mode evaluates the frozen integer symbols.
    """
    if mode == "train":
        a_t = a if isinstance(a, Tensor) else Tensor(np.asarray([float(a)]))
        scaled = ad.div(y_or_q, a_t)
        if noise is not None:
            scaled = ad.add(scaled, Tensor(noise.astype(scaled.data.dtype)))
        return rate_bits(scaled, mu, sigma, a)
    if mode == "infer":
        vals = Tensor(np.asarray(y_or_q, dtype=np.float64))
        return rate_bits(vals, mu, sigma, a)
    raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
