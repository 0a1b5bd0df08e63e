import numpy as np
import pytest

from vrvc import config
from vrvc.bitstream import FrameRecord, GofBitstream
from vrvc.codec import (
    canonical_codec,
    codec_from_block,
    codec_to_block,
    codec_weight_shapes,
    decode_frame,
    encode_frame,
)
from vrvc.entropy import CodecModel
from vrvc.errors import CorruptionError
from vrvc.field import AXIS_PAIRS, ResidualField

BBOX = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
RATE_TABLE = [(0.0018, 1.0), (0.025, 3.7268), (0.18, 10.0)]


def make_residual(rng, c=2, pres=4, gres=4, scale=2.0) -> ResidualField:
    r = ResidualField.zeros(c, pres, gres, BBOX)
    for name in AXIS_PAIRS:
        r.planes[name][:] = rng.normal(size=r.planes[name].shape) * scale
    r.grid[:] = rng.normal(size=r.grid.shape) * scale
    return r


def make_canonical(rng, c=2) -> CodecModel:
    model = CodecModel(c, rng)
    return canonical_codec(c, model.weight_arrays())


def plane_dims(r: ResidualField) -> dict:
    return {name: r.planes[name].shape[1:] for name in AXIS_PAIRS}


def test_encode_decode_symbol_exact(rng):
    model = make_canonical(rng)
    r = make_residual(rng)
    enc = encode_frame(r, 1, RATE_TABLE, model, frame_type=0)
    rec, qz, qy = decode_frame(enc.record, RATE_TABLE, model, 2, plane_dims(r), r.grid.shape, BBOX)
    assert np.array_equal(qz, enc.z_symbols)
    assert np.array_equal(qy, enc.y_symbols)
    for name in AXIS_PAIRS:
        assert np.array_equal(rec.planes[name], enc.reconstruction.planes[name])
    assert np.array_equal(rec.grid, enc.reconstruction.grid)


def test_zero_residual_degenerate_frame(rng):
    model = CodecModel(2, rng)
    # bias-free transforms make the zero frame carry all-zero symbols
    for w, b in model.analysis.layers:
        b.data[:] = 0
    model.grid_in[1].data[:] = 0
    for k, b in model.cnn:
        b.data[:] = 0
    model = canonical_codec(2, model.weight_arrays())
    r = ResidualField.zeros(2, 4, 4, BBOX)
    enc = encode_frame(r, 0, RATE_TABLE, model, frame_type=0)
    assert np.all(enc.z_symbols == 0) and np.all(enc.y_symbols == 0)
    dense = encode_frame(make_residual(rng, scale=6.0), 0, RATE_TABLE, model, frame_type=0)
    assert enc.record.payload_bytes < dense.record.payload_bytes
    # reconstruction is exactly the synthesis of the zero latent
    from vrvc.codec import _reconstruct

    expect = _reconstruct(np.zeros_like(enc.y_symbols), float(np.float32(RATE_TABLE[0][1])), model, r)
    for name in AXIS_PAIRS:
        assert np.array_equal(enc.reconstruction.planes[name], expect.planes[name])
    rec, _, qy = decode_frame(enc.record, RATE_TABLE, model, 2, plane_dims(r), r.grid.shape, BBOX)
    assert np.array_equal(rec.grid, enc.reconstruction.grid)


def test_roundtrip_many_random_frames(rng):
    # criterion-2 style sweep at unit scale: symbol-exact on randomized models
    for trial in range(10):
        c = int(rng.integers(1, 4))
        model = make_canonical(rng, c=c)
        r = make_residual(rng, c=c, pres=4, gres=4, scale=float(rng.uniform(0.1, 6.0)))
        idx = int(rng.integers(0, len(RATE_TABLE)))
        enc = encode_frame(r, idx, RATE_TABLE, model, frame_type=1)
        _, qz, qy = decode_frame(enc.record, RATE_TABLE, model, c, plane_dims(r), r.grid.shape, BBOX)
        assert np.array_equal(qz, enc.z_symbols) and np.array_equal(qy, enc.y_symbols)


def test_estimate_tracks_payload(rng):
    model = make_canonical(rng)
    r = make_residual(rng, pres=8, gres=8, scale=3.0)
    enc = encode_frame(r, 0, RATE_TABLE, model, frame_type=0)
    assert abs(enc.actual_bits - enc.est_bits) <= 0.02 * enc.actual_bits + 64


def test_monotone_step_on_fixed_model(rng):
    model = make_canonical(rng)
    r = make_residual(rng, pres=8, gres=8, scale=4.0)
    table = [(0.01, a) for a in (1.0, 1.9293, 3.7268, 7.1957, 10.0)]
    sizes = [encode_frame(r, i, table, model, frame_type=0).record.payload_bytes for i in range(len(table))]
    assert all(b <= a for a, b in zip(sizes, sizes[1:])), sizes


def test_weight_block_roundtrip(rng):
    config.set_float_mode("f32")
    try:
        model = CodecModel(3, rng)
        block = codec_to_block(model)
        rebuilt = codec_from_block(3, block)
        for a, b in zip(model.weight_arrays(), rebuilt.weight_arrays()):
            assert np.array_equal(np.asarray(a, dtype=np.float32), np.asarray(b, dtype=np.float32))
    finally:
        config.set_float_mode("f64")


def test_codec_weight_shapes_cover_params(rng):
    model = CodecModel(2, rng)
    shapes = codec_weight_shapes(2)
    got = [p.data.shape for p in model.params()]
    assert [tuple(s) for s in shapes] == got


# -- container ---------------------------------------------------------------------


def make_container(rng) -> GofBitstream:
    return GofBitstream(
        channels=2,
        plane_dims={"xy": (4, 4), "yz": (4, 4), "xz": (4, 4)},
        grid_dims=(4, 4, 4),
        bbox=BBOX,
        gof_length=2,
        rate_table=[(0.0018, 1.0), (0.18, 10.0)],
        phi_block=rng.bytes(40),
        entropy_block=rng.bytes(32),
        records=[
            FrameRecord(0, 0, rng.bytes(11), rng.bytes(23)),
            FrameRecord(0, 1, rng.bytes(7), rng.bytes(13)),
            FrameRecord(1, 0, rng.bytes(3), rng.bytes(5)),
            FrameRecord(1, 1, rng.bytes(2), rng.bytes(4)),
        ],
    )


def test_container_roundtrip(rng):
    bs = make_container(rng)
    data = bs.to_bytes()
    back = GofBitstream.from_bytes(data)
    assert back.channels == 2 and back.gof_length == 2
    assert back.plane_dims == bs.plane_dims and back.grid_dims == bs.grid_dims
    assert np.allclose(back.bbox, bs.bbox)
    assert back.rate_table == [(pytest.approx(l), pytest.approx(a)) for l, a in bs.rate_table]
    for ra, rb in zip(back.records, bs.records):
        assert (ra.frame_type, ra.rate_index, ra.z_payload, ra.y_payload) == (
            rb.frame_type,
            rb.rate_index,
            rb.z_payload,
            rb.y_payload,
        )
    assert back.to_bytes() == data


def test_container_bad_magic(rng):
    data = bytearray(make_container(rng).to_bytes())
    data[0] = ord("X")
    with pytest.raises(CorruptionError) as exc:
        GofBitstream.from_bytes(bytes(data))
    assert exc.value.offset == 0


def test_container_corrupted_length_field(rng):
    bs = make_container(rng)
    data = bytearray(bs.to_bytes())
    # blow up the phi block length field
    offset = 4 + 3 + 12 + 6 + 24 + 2 + 16
    data[offset : offset + 4] = (0xFFFFFFF0).to_bytes(4, "little")
    with pytest.raises(CorruptionError) as exc:
        GofBitstream.from_bytes(bytes(data))
    assert exc.value.offset >= 0


def test_container_truncated(rng):
    data = make_container(rng).to_bytes()
    with pytest.raises(CorruptionError):
        GofBitstream.from_bytes(data[:-3])
