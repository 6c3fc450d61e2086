import struct
import zlib

import numpy as np
import pytest

from auxcodec import container
from auxcodec.codec import (
    CodecError,
    decode_image,
    encode_image,
    to_model_input,
)
from auxcodec.config import CodecConfig
from auxcodec.container import (
    HEADER_SIZE,
    BadMagicError,
    ChecksumError,
    ConfigMismatchError,
    ContainerError,
    ContainerFormatError,
    ContainerHeader,
    TruncatedStreamError,
    VersionError,
)
from auxcodec.entropy import RateUnderflowWarning
from auxcodec.model import STREAMS, CodecModel
from auxcodec.ppm import PPMError, decode_ppm, encode_ppm

from conftest import TINY, random_model, smooth_image


@pytest.fixture(scope="module")
def model():
    return random_model(TINY, 0)


@pytest.fixture(scope="module")
def encoded(model):
    img = smooth_image(64, 64, seed=1)
    data, report, trace = encode_image(img, model)
    return img, data, report, trace


def refresh_crc(data: bytes) -> bytes:
    body = data[HEADER_SIZE:]
    crc = zlib.crc32(body, zlib.crc32(data[: HEADER_SIZE - 4])) & 0xFFFFFFFF
    return data[: HEADER_SIZE - 4] + struct.pack("<I", crc) + body


class TestContainer:
    def test_header_size(self):
        # magic 4 + version 1 + hash 8 + w,h 2x2 + lambda 1 + 4 lengths x4 + crc 4
        assert HEADER_SIZE == 4 + 1 + 8 + 4 + 1 + 16 + 4

    def test_pack_unpack(self):
        streams = [b"ab", b"", b"cdef", b"g"]
        header = ContainerHeader(b"12345678", 7, 9, 2, (2, 0, 4, 1))
        data = container.pack(header, streams)
        assert len(data) == HEADER_SIZE + 7
        h, s = container.unpack(data)
        assert h == header and s == streams

    def test_length_arithmetic(self, encoded):
        _, data, report, _ = encoded
        h = container.read_header(data)
        assert sum(h.lengths) == h.payload_size
        assert HEADER_SIZE + h.payload_size == len(data)
        assert all(n > 0 for n in h.lengths)

    def test_typed_errors(self, encoded):
        _, data, _, _ = encoded
        with pytest.raises(BadMagicError):
            container.read_header(b"XXXX" + data[4:])
        with pytest.raises(VersionError):
            container.read_header(data[:4] + b"\x09" + data[5:])
        with pytest.raises(TruncatedStreamError):
            container.read_header(data[:-1])
        with pytest.raises(TruncatedStreamError):
            container.read_header(data[:10])
        with pytest.raises(ContainerFormatError):
            container.read_header(data + b"\x00")
        flipped = bytearray(data)
        flipped[-1] ^= 0x40
        with pytest.raises(ChecksumError):
            container.read_header(bytes(flipped))
        with pytest.raises(TruncatedStreamError):
            container.read_header(b"AI")

    def test_checksum_covers_header(self, encoded):
        _, data, _, _ = encoded
        changed = bytearray(data)
        changed[14] ^= 1  # width field
        with pytest.raises(ChecksumError):
            container.read_header(bytes(changed))


class TestRoundTrip:
    def test_symbols_are_not_trivial(self, encoded):
        trace = encoded[3]
        for name in STREAMS:
            assert np.count_nonzero(trace.codes[name].values) > 0, name

    def test_decoder_matches_encoder(self, model, encoded):
        img, data, _, trace = encoded
        out, dtrace = decode_image(data, model, return_trace=True)
        assert out.shape == img.shape and out.dtype == np.uint8
        assert np.array_equal(dtrace.x_hat, trace.x_hat)
        for name in STREAMS:
            assert np.array_equal(dtrace.codes[name].values, trace.codes[name].values)
            assert np.array_equal(dtrace.latents[name], trace.latents[name])

    def test_encode_deterministic(self, model, encoded):
        img, data, _, _ = encoded
        assert encode_image(img, model)[0] == data

    def test_report_accounting(self, encoded):
        _, data, report, _ = encoded
        assert report.bpp == pytest.approx(8 * len(data) / (64 * 64))
        assert report.aux_bytes + report.main_bytes == report.payload_bytes
        assert 0 < report.aux_ratio < 1
        fields = report.csv_line(31.5).split(",")
        assert len(fields) == 5 and fields[1] == "31.5000"
        assert fields[4] == f"{report.aux_ratio:.2f}"

    def test_one_pixel_image(self, model):
        img = np.array([[[200, 10, 90]]], dtype=np.uint8)
        data, report, trace = encode_image(img, model)
        assert to_model_input(img, 64).shape == (1, 3, 64, 64)
        out = decode_image(data, model)
        assert out.shape == (1, 1, 3)
        assert report.bpp == 8 * len(data)

    def test_odd_size_crops(self, model):
        img = smooth_image(70, 33, seed=4)
        data, _, trace = encode_image(img, model)
        out, dtrace = decode_image(data, model, return_trace=True)
        assert out.shape == (70, 33, 3)
        assert np.array_equal(dtrace.x_hat, trace.x_hat)

    def test_zero_size_rejected(self, model):
        with pytest.raises(CodecError):
            encode_image(np.zeros((0, 4, 3), dtype=np.uint8), model)

    def test_wrong_model_rejected(self, encoded):
        _, data, _, _ = encoded
        with pytest.raises(ConfigMismatchError):
            decode_image(data, CodecModel(TINY.replace(seed=99)))

    def test_output_range(self, encoded):
        _, _, _, trace = encoded
        assert trace.x_hat.min() >= 0.0 and trace.x_hat.max() <= 1.0


class TestTransportIdentity:
    def test_random_models(self):
        nonzero = 0
        for seed in range(20):
            model = random_model(TINY, seed)
            for k in range(5):
                img = smooth_image(64, 64, seed=100 * seed + k)
                data, _, trace = encode_image(img, model)
                nonzero += np.count_nonzero(trace.codes["y"].values)
                _, dtrace = decode_image(data, model, return_trace=True)
                for name in ("y_aux", "y", "z_aux", "z"):
                    assert np.array_equal(dtrace.latents[name], trace.latents[name]), (seed, k, name)
        assert nonzero > 1000


class TestRateFidelity:
    @pytest.mark.parametrize("cfg", [TINY, CodecConfig()], ids=["tiny", "default"])
    def test_estimate_tracks_payload(self, cfg):
        for seed in range(3):
            model = random_model(cfg, seed)
            for k in range(2):
                img = smooth_image(64, 64, seed=7 * seed + k)
                _, report, _ = encode_image(img, model)
                actual = 8 * report.payload_bytes
                for est in (report.estimated_bits, report.table_bits):
                    assert abs(sum(est.values()) - actual) <= 0.01 * actual + 256

    def test_table_bits_hold_in_the_far_tails(self):
        # latents far outside the predicted scales: the model pmf hits its
        # floor while the coder pays only escape mass plus payload bits
        model = random_model(CodecConfig(), 0, latent_gain=30.0)
        with pytest.warns(RateUnderflowWarning):
            _, report, trace = encode_image(smooth_image(64, 64, seed=0), model)
        assert np.abs(trace.codes["y"].values).max() > 20
        for name, nbytes in zip(STREAMS, report.stream_bytes):
            assert 0 <= 8 * nbytes - report.table_bits[name] <= 40, name
        actual = 8 * report.payload_bytes
        assert sum(report.estimated_bits.values()) - actual > 0.01 * actual + 256


class TestFaultInjection:
    def test_ten_thousand_faults(self, model, encoded):
        _, data, _, _ = encoded
        rng = np.random.default_rng(2024)
        kinds = {}
        for case in range(10_000):
            buf = bytearray(data)
            mode = case % 5
            if mode == 0:
                buf = buf[: rng.integers(0, len(buf))]
            elif mode == 1:
                # distinct positions so two flips never cancel
                for pos in rng.choice(len(buf), size=rng.integers(1, 4), replace=False):
                    buf[pos] ^= int(rng.integers(1, 256))
            elif mode == 2:
                buf = buf + bytes(rng.integers(0, 256, rng.integers(1, 8), dtype=np.uint8))
            elif mode == 3:
                buf = bytes(rng.integers(0, 256, rng.integers(0, 80), dtype=np.uint8))
            else:
                pos = rng.integers(0, len(buf))
                del buf[pos : pos + rng.integers(1, 5)]
            try:
                decode_image(bytes(buf), model)
            except ContainerError as exc:
                kinds[type(exc).__name__] = kinds.get(type(exc).__name__, 0) + 1
            else:
                kinds["decoded"] = kinds.get("decoded", 0) + 1
        assert kinds.get("decoded", 0) == 0
        for name in ("TruncatedStreamError", "ChecksumError", "BadMagicError"):
            assert kinds.get(name, 0) > 0

    def test_payload_corruption_with_valid_checksum(self, model, encoded):
        # bypasses the checksum so the sub-stream decoders see garbage
        _, data, _, _ = encoded
        rng = np.random.default_rng(5)
        outcomes = {"decoded": 0, "error": 0}
        for _ in range(150):
            buf = bytearray(data)
            for _ in range(rng.integers(1, 6)):
                pos = int(rng.integers(HEADER_SIZE, len(buf)))
                buf[pos] = int(rng.integers(0, 256))
            try:
                img = decode_image(refresh_crc(bytes(buf)), model)
            except ContainerError:
                outcomes["error"] += 1
            else:
                assert img.dtype == np.uint8 and img.shape == (64, 64, 3)
                outcomes["decoded"] += 1
        assert sum(outcomes.values()) == 150

    def test_escape_garbage_is_typed(self, model, encoded):
        # a payload of 0xFF bytes drives the decoder into escape symbols
        _, data, _, _ = encoded
        h = container.read_header(data)
        streams = [b"\xff" * n for n in h.lengths]
        bad = container.pack(h, streams)
        try:
            decode_image(bad, model)
        except ContainerError:
            pass


class TestPPM:
    def test_round_trip(self):
        img = smooth_image(5, 7)
        assert np.array_equal(decode_ppm(encode_ppm(img)), img)

    def test_comments(self):
        raw = b"P6\n# made by hand\n2 1\n# max\n255\n" + bytes(range(6))
        assert decode_ppm(raw).tolist() == [[[0, 1, 2], [3, 4, 5]]]

    @pytest.mark.parametrize("raw", [b"P5\n1 1\n255\n\x00", b"P6\n2 2\n255\n\x00", b"P6\n1 1\n65535\n" + b"\x00" * 6, b"P6\n"])
    def test_rejects(self, raw):
        with pytest.raises(PPMError):
            decode_ppm(raw)
