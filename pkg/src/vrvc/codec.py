"""Frame-level encode/decode: the closed coding loop.

Both sides run the same canonical inference: weights round-tripped through
f32 (the serialized form) and lifted to f64, so the encoder's reconstruction
equals the decoder's bit for bit.  All stream-facing probabilities come from
integer CDF tables built on that canonical path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import config, rangecoder
from .autodiff import Mlp, Tensor, no_grad, round_half_away
from .bitstream import FrameRecord, pack_f32_arrays, unpack_f32_arrays
from .entropy import (
    C_Z,
    CNN_WIDTH,
    COMPONENTS,
    ENTROPY_HIDDEN,
    CodecModel,
    analysis_transform,
    context_transform,
    entropy_params,
    locations_flat,
    synthesis_transform,
)
from .field import AXIS_PAIRS, ResidualField

PHI_HIDDEN = (64, 64)
DIR_DIM = 27


def phi_layer_sizes(channels: int) -> list[int]:
    return [3 * channels + DIR_DIM, *PHI_HIDDEN, 3]


def codec_weight_shapes(channels: int) -> list[tuple]:
    """Shapes of CodecModel.params() in serialization order, version 1."""
    c = channels
    shapes = []
    for sizes in ([c, 2 * c, c], [c, 2 * c, c]):  # analysis, synthesis
        for din, dout in zip(sizes[:-1], sizes[1:]):
            shapes += [(din, dout), (dout,)]
    shapes += [(1, c), (c,), (c, 1), (1,)]  # grid adapters
    widths = [c, CNN_WIDTH, CNN_WIDTH, CNN_WIDTH, CNN_WIDTH, C_Z]
    for cin, cout in zip(widths[:-1], widths[1:]):
        shapes += [(cout, cin, 3, 3), (cout,)]
    sizes = [C_Z + 1, ENTROPY_HIDDEN, ENTROPY_HIDDEN, 2 * c]
    for din, dout in zip(sizes[:-1], sizes[1:]):
        shapes += [(din, dout), (dout,)]
    shapes.append((C_Z,))
    return shapes


def mlp_weight_shapes(sizes: list[int]) -> list[tuple]:
    shapes = []
    for din, dout in zip(sizes[:-1], sizes[1:]):
        shapes += [(din, dout), (dout,)]
    return shapes


def pack_mlp(mlp: Mlp) -> bytes:
    return pack_f32_arrays([p.data for p in mlp.params()])


def unpack_mlp(block: bytes, sizes: list[int], activation: str = "relu") -> Mlp:
    arrays = unpack_f32_arrays(block, mlp_weight_shapes(sizes))
    layers = []
    for i in range(0, len(arrays), 2):
        layers.append((Tensor(arrays[i], dtype=np.float64), Tensor(arrays[i + 1], dtype=np.float64)))
    return Mlp(layers, activation)


def canonical_codec(channels: int, weight_arrays: list[np.ndarray]) -> CodecModel:
    """f64 model rebuilt from (f32-precision) weight arrays; no gradients."""
    with config.precision("f64"), no_grad():
        model = CodecModel(channels, np.random.Generator(np.random.PCG64(0)))
        model.load_weight_arrays([np.asarray(a, dtype=np.float32).astype(np.float64) for a in weight_arrays])
    return model


def codec_to_block(model: CodecModel) -> bytes:
    return pack_f32_arrays(model.weight_arrays())


def codec_from_block(channels: int, block: bytes) -> CodecModel:
    arrays = unpack_f32_arrays(block, codec_weight_shapes(channels))
    return canonical_codec(channels, arrays)


@dataclass
class EncodedFrame:
    record: FrameRecord
    reconstruction: ResidualField
    est_bits: float  # float-model estimate for the whole record (z + y)
    actual_bits: int
    z_symbols: np.ndarray
    y_symbols: np.ndarray


def _flatten_stack(stack: dict[str, Tensor]) -> np.ndarray:
    """Concatenate per-component location-major/channel-minor values."""
    return np.concatenate([locations_flat(stack[name]).data.reshape(-1) for name in COMPONENTS])


def _z_sigma_flat(model: CodecModel, z_shapes: dict[str, tuple]) -> np.ndarray:
    sig = np.asarray(model.z_scales().data, dtype=np.float64)
    parts = []
    for name in COMPONENTS:
        b, c, h, w = z_shapes[name]
        parts.append(np.tile(sig, b * h * w))
    return np.concatenate(parts)


def _split_to_stack(flat: np.ndarray, shapes: dict[str, tuple], dtype=np.float64) -> dict[str, Tensor]:
    out = {}
    at = 0
    for name in COMPONENTS:
        b, c, h, w = shapes[name]
        n = b * c * h * w
        chunk = flat[at : at + n].reshape(b, h, w, c)
        out[name] = Tensor(np.transpose(chunk, (0, 3, 1, 2)).astype(dtype))
        at += n
    return out


def _stack_shapes(channels: int, plane_dims: dict[str, tuple], grid_dims: tuple, c_per_loc: int) -> dict[str, tuple]:
    shapes = {}
    for name in AXIS_PAIRS:
        h, w = plane_dims[name]
        shapes[name] = (1, c_per_loc, h, w)
    dx, dy, dz = grid_dims
    shapes["grid"] = (dz, c_per_loc, dx, dy)
    return shapes


def encode_frame(
    residual: ResidualField,
    rate_index: int,
    rate_table: list[tuple[float, float]],
    model: CodecModel,
    frame_type: int,
) -> EncodedFrame:
    """Code one residual at one rate point; returns the decoder-exact reconstruction."""
    lam, a = rate_table[rate_index]
    a = float(np.float32(a))
    with config.precision("f64"), no_grad():
        res64 = residual.astype(np.float64)
        y = analysis_transform(res64, model)
        z = context_transform(y, model)

        z_shapes = {name: tuple(t.data.shape) for name in COMPONENTS for t in [z[name]]}
        z_flat = _flatten_stack(z)
        q_z = round_half_away(z_flat).astype(np.int64)
        sig_z = _z_sigma_flat(model, z_shapes)
        z_tables = rangecoder.gaussian_tables(np.zeros(q_z.size), sig_z, 1.0)
        z_payload = rangecoder.encode_symbols(q_z, z_tables)
        bits_z = rangecoder.estimate_bits(q_z, np.zeros(q_z.size), sig_z, 1.0)

        z_hat = _split_to_stack(q_z.astype(np.float64), z_shapes)
        mu_flat, sig_flat = _entropy_params_flat(z_hat, a, model)

        y_flat = _flatten_stack(y)
        q_y = round_half_away(y_flat / a).astype(np.int64)
        y_tables = rangecoder.gaussian_tables(mu_flat, sig_flat, a)
        y_payload = rangecoder.encode_symbols(q_y, y_tables)
        bits_y = rangecoder.estimate_bits(q_y, mu_flat, sig_flat, a)

        recon = _reconstruct(q_y, a, model, res64)
    record = FrameRecord(frame_type, rate_index, z_payload, y_payload)
    return EncodedFrame(record, recon, bits_z + bits_y, 8 * record.payload_bytes, q_z, q_y)


def _entropy_params_flat(z_hat: dict[str, Tensor], a: float, model: CodecModel):
    mus, sigs = [], []
    for name in COMPONENTS:
        mu, sig = entropy_params(locations_flat(z_hat[name]), a, model)
        mus.append(mu.data.reshape(-1))
        sigs.append(sig.data.reshape(-1))
    return np.concatenate(mus), np.concatenate(sigs)


def _reconstruct(q_y: np.ndarray, a: float, model: CodecModel, like: ResidualField) -> ResidualField:
    y_shapes = _stack_shapes(model.channels, {n: like.planes[n].shape[1:] for n in AXIS_PAIRS}, like.grid.shape, model.channels)
    y_hat = _split_to_stack(q_y.astype(np.float64) * a, y_shapes)
    rec = synthesis_transform(y_hat, model, like.grid.shape)
    return ResidualField(
        {name: rec[name].data.copy() for name in AXIS_PAIRS}, rec["grid"].data.copy(), like.bbox.copy(), like.channels
    )


def decode_gof_model(bs) -> tuple[CodecModel, Mlp]:
    """Rebuild the canonical codec and color decoder from a container header."""
    model = codec_from_block(bs.channels, bs.entropy_block)
    phi = unpack_mlp(bs.phi_block, phi_layer_sizes(bs.channels))
    return model, phi


def decode_fields(bs, rate_index: int, up_to_frame: int | None = None, model: CodecModel | None = None) -> list:
    """Reconstruct the FrameFields of one rate chain, frames 0..up_to_frame.

    Decoding frame t requires decoding 1..t first (P-frame dependency), so
    cost is linear in t.
    """
    from .field import FrameField, compensate

    if model is None:
        model, _ = decode_gof_model(bs)
    last = bs.gof_length - 1 if up_to_frame is None else up_to_frame
    current = FrameField.zeros(bs.channels, bs.plane_dims["xy"][0], bs.grid_dims[0], bs.bbox, dtype=np.float64)
    current.planes = {name: np.zeros((bs.channels,) + tuple(bs.plane_dims[name])) for name in AXIS_PAIRS}
    current.grid = np.zeros(bs.grid_dims)
    fields = []
    for t in range(last + 1):
        rec = bs.record(t, rate_index)
        residual, _, _ = decode_frame(rec, bs.rate_table, model, bs.channels, bs.plane_dims, bs.grid_dims, bs.bbox)
        current = compensate(current, residual)
        fields.append(current)
    return fields


def decode_frame(
    record: FrameRecord,
    rate_table: list[tuple[float, float]],
    model: CodecModel,
    channels: int,
    plane_dims: dict[str, tuple],
    grid_dims: tuple,
    bbox: np.ndarray,
) -> tuple[ResidualField, np.ndarray, np.ndarray]:
    """Exact inverse of encode_frame: returns (reconstruction, z symbols, y symbols)."""
    lam, a = rate_table[record.rate_index]
    a = float(np.float32(a))
    with config.precision("f64"), no_grad():
        z_shapes = _stack_shapes(channels, plane_dims, grid_dims, C_Z)
        n_z = sum(int(np.prod(s)) for s in z_shapes.values())
        sig_z = _z_sigma_flat(model, z_shapes)
        z_tables = rangecoder.gaussian_tables(np.zeros(n_z), sig_z, 1.0)
        q_z = rangecoder.decode_symbols(record.z_payload, z_tables)

        z_hat = _split_to_stack(q_z.astype(np.float64), z_shapes)
        mu_flat, sig_flat = _entropy_params_flat(z_hat, a, model)
        y_tables = rangecoder.gaussian_tables(mu_flat, sig_flat, a)
        q_y = rangecoder.decode_symbols(record.y_payload, y_tables)

        like = ResidualField(
            {name: np.zeros((channels,) + tuple(plane_dims[name])) for name in AXIS_PAIRS},
            np.zeros(grid_dims),
            np.asarray(bbox, dtype=np.float64).reshape(2, 3),
            channels,
        )
        recon = _reconstruct(q_y, a, model, like)
    return recon, q_z, q_y
