import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eccpos.fronthaul import (FronthaulMessage, MessageFormatError, PayloadLengthError,
                              QuantizerConfig, calibrate_step, cell_index, decode_message,
                              encode_message, index_level, level_index, pack, payload_bytes,
                              payload_ratio, quantize, unpack)

bits = st.integers(min_value=1, max_value=16)
steps = st.floats(min_value=1e-4, max_value=10.0)


def test_zero_maps_to_positive_half_step():
    cfg = QuantizerConfig(4, 0.25)
    assert quantize(0.0, cfg) == 0.125


def test_saturation_at_clip_amplitude():
    cfg = QuantizerConfig(5, 0.3)
    A = (2 ** 5 - 1) * 0.3 / 2
    assert cfg.amplitude == A
    assert quantize(10 * A, cfg) == pytest.approx(A, abs=1e-12)
    assert quantize(-10 * A, cfg) == pytest.approx(-A, abs=1e-12)


def test_levels_are_odd_half_steps():
    cfg = QuantizerConfig(2, 1.0)
    assert np.array_equal(cfg.reconstruction_levels(), [-1.5, -0.5, 0.5, 1.5])
    assert np.array_equal(level_index([-1.5, -0.5, 0.5, 1.5], cfg), [0, 1, 2, 3])


def test_non_finite_input_rejected():
    with pytest.raises(ValueError):
        quantize(np.array([0.0, np.nan]), QuantizerConfig(3, 1.0))
    with pytest.raises(ValueError):
        quantize(np.inf, QuantizerConfig(3, 1.0))


def test_non_level_rejected():
    with pytest.raises(ValueError):
        level_index(0.0, QuantizerConfig(3, 1.0))
    with pytest.raises(ValueError):
        level_index(100.5, QuantizerConfig(3, 1.0))


@settings(max_examples=200, deadline=None)
@given(bits, steps, st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=64))
def test_quantizer_properties(q, step, ys):
    cfg = QuantizerConfig(q, step)
    y = np.array(ys)
    out = quantize(y, cfg)
    A = cfg.amplitude
    assert np.all(np.abs(out) <= A * (1 + 1e-12))
    inside = np.abs(y) <= A
    assert np.all(np.abs(out[inside] - y[inside]) <= step / 2 * (1 + 1e-9))
    assert len(np.unique(out)) <= 2 ** q
    order = np.argsort(y, kind="stable")
    assert np.all(np.diff(out[order]) >= 0)
    assert np.array_equal(index_level(level_index(out, cfg), cfg), out)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10), steps)
def test_all_levels_round_trip(q, step):
    cfg = QuantizerConfig(q, step)
    k = np.arange(2 ** q)
    assert np.array_equal(level_index(index_level(k, cfg), cfg), k)
    dense = np.linspace(-2 * cfg.amplitude, 2 * cfg.amplitude, 8 * 2 ** q)
    assert len(np.unique(quantize(dense, cfg))) == 2 ** q


def test_pack_bit_layout():
    assert pack([3], 2) == bytes([0b11000000])
    assert pack([0, 1, 2, 3], 2) == bytes([0b00011011])
    assert pack([1023, 0], 10) == bytes([0xFF, 0xC0, 0x00])


def test_pack_overflow():
    with pytest.raises(OverflowError):
        pack([4], 2)
    with pytest.raises(OverflowError):
        pack([-1], 2)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 24), st.data())
def test_pack_round_trip(q, data):
    idx = data.draw(st.lists(st.integers(0, 2 ** q - 1), min_size=0, max_size=80))
    payload = pack(idx, q)
    assert len(payload) == payload_bytes(len(idx), q) == -(-len(idx) * q // 8)
    assert list(unpack(payload, len(idx), q)) == idx
    pad = len(payload) * 8 - len(idx) * q
    if pad:
        assert payload[-1] & ((1 << pad) - 1) == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), steps, st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40),
       st.floats(0, 1e4), st.integers(0, 2 ** 16 - 1), st.integers(0, 2 ** 64 - 1))
def test_message_round_trip(q, step, zs, gain, bs, snap):
    cfg = QuantizerConfig(q, step)
    z = np.array(zs)
    msg = encode_message(z, gain, cfg, bs, snap)
    assert msg.payload_bits == z.size * q
    wire = msg.to_bytes()
    assert wire[:6] == b"ECCFH1"
    back = FronthaulMessage.from_bytes(wire)
    assert back == msg
    z_hat, g_hat = decode_message(wire, cfg)
    assert np.array_equal(z_hat, quantize(z, cfg))
    assert g_hat == float(np.float32(gain))
    # already-quantized vectors survive exactly
    assert np.array_equal(decode_message(encode_message(z_hat, gain, cfg), cfg)[0], z_hat)


def test_payload_length_fixed_regardless_of_content():
    cfg = QuantizerConfig(10, 0.01)
    lens = {len(encode_message(np.random.default_rng(s).normal(size=768) * s, 1.0, cfg).payload)
            for s in range(5)}
    assert lens == {960}


def test_malformed_messages():
    cfg = QuantizerConfig(4, 0.1)
    wire = encode_message(np.zeros(6), 1.0, cfg).to_bytes()
    with pytest.raises(MessageFormatError):
        FronthaulMessage.from_bytes(b"XXXXXX" + wire[6:])
    with pytest.raises(MessageFormatError):
        FronthaulMessage.from_bytes(wire[:10])
    with pytest.raises(PayloadLengthError):
        FronthaulMessage.from_bytes(wire[:-1])
    with pytest.raises(PayloadLengthError):
        FronthaulMessage.from_bytes(wire + b"\x00")
    with pytest.raises(MessageFormatError):
        decode_message(wire, QuantizerConfig(5, 0.1))


def test_calibrate_step_examples():
    assert calibrate_step([1.0, -1.0, 1.0], 1, 100) == 2.0
    u = np.random.default_rng(0).uniform(-1, 1, 1000)
    u[0] = 1.0
    assert calibrate_step(u, 4, 100) == pytest.approx(2 / 15, rel=1e-15)
    with pytest.raises(ValueError):
        calibrate_step(np.zeros(5), 4)
    with pytest.raises(ValueError):
        calibrate_step([], 4)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=300),
       st.floats(1.0, 100.0), st.integers(1, 12))
def test_calibration_coverage(samples, pct, q):
    a = np.abs(np.array(samples))
    if not np.any(a):
        return
    step = calibrate_step(samples, q, pct)
    A = QuantizerConfig(q, step).amplitude
    assert np.mean(a <= A * (1 + 1e-12)) >= pct / 100 - 1e-12
    if pct == 100.0:
        assert np.all(a <= A * (1 + 1e-12))


def test_calibration_monotone_in_percentile():
    x = np.random.default_rng(1).normal(size=2000)
    s = [calibrate_step(x, 6, p) for p in (50, 90, 99, 99.9, 100)]
    assert s == sorted(s)


@pytest.mark.parametrize("q,eta", [(10, 0.0625), (8, 0.05), (6, 0.0375), (4, 0.025)])
def test_payload_ratio_full_scale(q, eta):
    assert payload_ratio(768, q, 10, 8, 24) == eta


def test_payload_ratio_with_gain_and_linearity():
    assert payload_ratio(768, 10, 10, 8, 24, include_gain=True) == (7680 + 32) / 122880
    assert payload_ratio(32, 8, 2, 2, 8) == 2 * payload_ratio(32, 4, 2, 2, 8)


def test_cell_index_range():
    cfg = QuantizerConfig(3, 1.0)
    idx = cell_index(np.array([-1e300, -4.0, -0.1, 0.0, 3.99, 1e300]), cfg)
    assert list(idx) == [0, 0, 3, 4, 7, 7]
