import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from satcodec.bitstream import (
    BadMagicError,
    Bitstream,
    BitstreamError,
    FieldRangeError,
    ImageFormatError,
    LengthMismatchError,
    TileStream,
    TrailingDataError,
    TruncatedError,
    UnsupportedVersionError,
    container_kind,
    load_weights,
    read_bitstream,
    read_ppm,
    read_tile_stream,
    save_weights,
    write_bitstream,
    write_ppm,
    write_tile_stream,
)

META = (31.0, 1.2e7, 0.5, 0.1, 12.0, 200.0, 140.0, 45.0)

streams = st.builds(
    Bitstream,
    width=st.integers(1, 2**32 - 1),
    height=st.integers(1, 2**32 - 1),
    lambda_index=st.integers(0, 3),
    metadata=st.one_of(st.just(()), st.tuples(*[st.floats(-1e9, 1e9, allow_nan=False)] * 8)),
    hyper=st.binary(max_size=64),
    main=st.binary(max_size=256),
)


@given(streams)
def test_container_round_trip(bs):
    data = write_bitstream(bs)
    assert read_bitstream(data) == bs
    assert len(data) == bs.header_bytes + bs.payload_bytes


def test_minimal_stream_and_header_arithmetic():
    bs = Bitstream(256, 256, 2, META)
    data = write_bitstream(bs)
    assert len(data) == 4 + 1 + 4 + 4 + 1 + 1 + 64 + 4 + 4 == 87
    assert data[:4] == b"CSMC" and data[4] == 1
    assert struct.unpack_from("<II", data, 5) == (256, 256)
    assert read_bitstream(data) == bs


def test_typed_failures():
    data = write_bitstream(Bitstream(16, 16, 0, META, b"\x00abcde", b"\x00xyz12"))
    with pytest.raises(BadMagicError):
        read_bitstream(b"XSMC" + data[4:])
    with pytest.raises(UnsupportedVersionError):
        read_bitstream(data[:4] + b"\x07" + data[5:])
    with pytest.raises(TruncatedError):
        read_bitstream(data[:50])
    with pytest.raises(LengthMismatchError):
        read_bitstream(data[:-1])
    with pytest.raises(TrailingDataError):
        read_bitstream(data + b"\x00")
    with pytest.raises(FieldRangeError):
        read_bitstream(data[:13] + b"\x09" + data[14:])
    bad_len = bytearray(data)
    struct.pack_into("<I", bad_len, 79, 1000)
    with pytest.raises((LengthMismatchError, TruncatedError)):
        read_bitstream(bytes(bad_len))
    with pytest.raises(FieldRangeError):
        write_bitstream(Bitstream(0, 16, 0, ()))
    with pytest.raises(FieldRangeError):
        write_bitstream(Bitstream(16, 16, 4, ()))


def test_every_single_header_byte_corruption_is_typed_or_detected():
    data = write_bitstream(Bitstream(256, 256, 2, META, b"\x00hyper", b"\x00main!"))
    original = read_bitstream(data)
    for pos in range(87):
        for flip in (0x01, 0x80, 0xFF):
            mutated = bytearray(data)
            mutated[pos] ^= flip
            try:
                parsed = read_bitstream(bytes(mutated))
            except BitstreamError as exc:
                assert exc.category
                continue
            # Structurally valid mutations (a size or metadata value) still change what is read.
            assert parsed != original


@given(st.binary(max_size=200))
def test_arbitrary_bytes_never_crash(data):
    for reader in (read_bitstream, read_tile_stream, load_weights, container_kind, read_ppm):
        try:
            reader(data)
        except BitstreamError:
            pass


def test_tile_stream_round_trip_and_checks():
    ts = TileStream(600, 520, 256, 2, 2, [b"a", b"bb", b"", b"dddd"])
    data = write_tile_stream(ts)
    assert container_kind(data) == "tiles"
    assert read_tile_stream(data) == ts
    with pytest.raises(FieldRangeError):
        write_tile_stream(TileStream(600, 520, 256, 2, 2, [b"a"]))
    with pytest.raises(FieldRangeError):
        read_tile_stream(write_tile_stream(TileStream(300, 300, 256, 2, 1, [b"a", b"b"])))


def test_weights_round_trip_is_bitwise(rng):
    tensors = {
        "a.weight": rng.standard_normal((3, 2, 5, 5)).astype(np.float32),
        "b": np.float32(rng.standard_normal((7,))),
        "scalar": np.array(3.25, dtype=np.float32),
        "empty": np.zeros((0, 4), dtype=np.float32),
    }
    config = {"codec": {"channels": 8}, "lambda_index": 1}
    data = save_weights(tensors, config)
    assert data[:4] == b"CSMW"
    loaded, cfg = load_weights(data)
    assert cfg == config
    assert set(loaded) == set(tensors)
    for k, v in tensors.items():
        assert loaded[k].tobytes() == np.asarray(v, dtype="<f4").tobytes() and loaded[k].shape == v.shape
    assert save_weights(loaded, cfg) == data
    with pytest.raises(TruncatedError):
        load_weights(data[:-2])
    with pytest.raises(FieldRangeError):
        save_weights({"x": np.array([np.nan], dtype=np.float32)})


def test_ppm_cases(rng):
    white = read_ppm(b"P6\n1 1\n255\n\xff\xff\xff")
    assert white.shape == (3, 1, 1) and np.all(white == 1.0)
    pix = rng.integers(0, 256, (3, 5, 7)).astype(np.float64) / 255.0
    data = write_ppm(pix)
    assert write_ppm(read_ppm(data)) == data
    np.testing.assert_array_equal(read_ppm(data), pix.astype(np.float32))
    assert read_ppm(b"P6 # comment\n2 1 255\n" + bytes(6)).shape == (3, 1, 2)
    for bad in (b"P5\n1 1\n255\n\x00", b"P6\n1 1\n65535\n" + bytes(6), b"P6\n2 2\n255\n" + bytes(3), b"P6\n0 1\n255\n"):
        with pytest.raises(ImageFormatError):
            read_ppm(bad)
