"""Midrise uniform quantization and the fixed-length fronthaul wire format.

Each base station sends one message per snapshot: a ``D * Q`` bit payload of
quantizer cell indices (MSB first, fields in frequency-ordered latent order)
plus a float32 gain side-information field.

Wire layout (header little-endian)::

    b"ECCFH1" | bs_id u16 | snapshot_id u64 | Q u8 | D u32 | gain f32 | payload

The payload is ``ceil(D * Q / 8)`` bytes with zero pad bits at the end.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"ECCFH1"
_HEADER = struct.Struct("<6sHQBIf")
GAIN_BITS = 32


class MessageFormatError(ValueError):
    """Header is not a valid fronthaul message header."""


class PayloadLengthError(ValueError):
    """Payload byte count disagrees with the ``D * Q`` declared in the header."""


@dataclass(frozen=True)
class QuantizerConfig:
    n_bits: int
    step: float

    def __post_init__(self):
        if self.n_bits < 1:
            raise ValueError("quantizer needs at least one bit")
        if not self.step > 0:
            raise ValueError(f"quantizer step must be positive, got {self.step}")

    @property
    def levels(self) -> int:
        return 1 << self.n_bits

    @property
    def amplitude(self) -> float:
        """Clip amplitude ``(2**Q - 1) * step / 2``; also the outermost level."""
        return (self.levels - 1) * self.step / 2.0

    def reconstruction_levels(self) -> np.ndarray:
        return index_level(np.arange(self.levels), self)


def calibrate_step(samples, n_bits: int, percentile: float = 99.9) -> float:
    """Step size whose clip amplitude covers ``percentile`` % of ``|samples|``.

    Uses the upper empirical percentile so the covered fraction is never below
    the request.
    """
    a = np.abs(np.asarray(samples, dtype=np.float64)).ravel()
    if a.size == 0:
        raise ValueError("cannot calibrate on an empty sample set")
    if not 0 < percentile <= 100:
        raise ValueError(f"percentile must lie in (0, 100], got {percentile}")
    if not np.any(a):
        raise ValueError("degenerate latent: all calibration samples are zero")
    q = float(np.percentile(a, percentile, method="higher"))
    if q == 0.0:
        # mostly-zero samples: a zero step is invalid, take the smallest nonzero
        q = float(np.min(a[a > 0]))
    return 2.0 * q / ((1 << n_bits) - 1)


def quantize(y, cfg: QuantizerConfig) -> np.ndarray:
    """Elementwise midrise quantization with saturation at ``+-A``."""
    # Going through the cell index keeps the result bit-identical to what
    # the decoder reconstructs from the packed payload.
    return index_level(cell_index(y, cfg), cfg)


def cell_index(y, cfg: QuantizerConfig) -> np.ndarray:
    """Index in ``[0, 2**Q - 1]`` of the cell ``quantize`` maps ``y`` to."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("cannot quantize non-finite values")
    half = cfg.levels >> 1
    cell = np.clip(np.floor(y / cfg.step), -half, half - 1)
    return cell.astype(np.int64) + half


def level_index(level, cfg: QuantizerConfig) -> np.ndarray:
    level = np.asarray(level, dtype=np.float64)
    u = level / cfg.step - 0.5
    r = np.round(u)
    k = r.astype(np.int64) + (cfg.levels >> 1)
    if np.any(np.abs(u - r) > 1e-9) or np.any(k < 0) or np.any(k >= cfg.levels):
        raise ValueError("input is not a reconstruction level of this quantizer")
    return k


def index_level(index, cfg: QuantizerConfig) -> np.ndarray:
    k = np.asarray(index, dtype=np.int64)
    if np.any(k < 0) or np.any(k >= cfg.levels):
        raise ValueError(f"index outside [0, {cfg.levels - 1}]")
    return (k - (cfg.levels >> 1) + 0.5) * cfg.step


def pack(indices, n_bits: int) -> bytes:
    """Concatenate ``n_bits``-wide fields MSB first; zero-pad the last byte."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if np.any(idx < 0) or np.any(idx >= (1 << n_bits)):
        raise OverflowError(f"index does not fit in {n_bits} bits")
    shifts = np.arange(n_bits - 1, -1, -1)
    bits = ((idx[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.ravel()).tobytes()


def unpack(payload: bytes, count: int, n_bits: int) -> np.ndarray:
    if len(payload) != payload_bytes(count, n_bits):
        raise PayloadLengthError(f"payload has {len(payload)} bytes, expected "
                                 f"{payload_bytes(count, n_bits)}")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[:count * n_bits]
    weights = 1 << np.arange(n_bits - 1, -1, -1, dtype=np.int64)
    return bits.reshape(count, n_bits).astype(np.int64) @ weights


def payload_bytes(count: int, n_bits: int) -> int:
    return math.ceil(count * n_bits / 8)


@dataclass(frozen=True)
class FronthaulMessage:
    bs_id: int
    snapshot_id: int
    n_bits: int
    length: int
    gain: float
    payload: bytes

    @property
    def payload_bits(self) -> int:
        return self.length * self.n_bits

    def to_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, self.bs_id, self.snapshot_id, self.n_bits,
                            self.length, self.gain) + self.payload

    @classmethod
    def from_bytes(cls, buf: bytes) -> "FronthaulMessage":
        if len(buf) < _HEADER.size:
            raise MessageFormatError(f"message shorter than the {_HEADER.size}-byte header")
        magic, bs_id, snap, q, d, gain = _HEADER.unpack_from(buf)
        if magic != MAGIC:
            raise MessageFormatError(f"bad magic {magic!r}")
        if q < 1:
            raise MessageFormatError("Q must be at least 1")
        payload = bytes(buf[_HEADER.size:])
        if len(payload) != payload_bytes(d, q):
            raise PayloadLengthError(f"payload has {len(payload)} bytes, header "
                                     f"declares D={d}, Q={q}")
        return cls(bs_id, snap, q, d, gain, payload)


def encode_message(z, gain: float, cfg: QuantizerConfig, bs_id: int = 0,
                   snapshot_id: int = 0) -> FronthaulMessage:
    """Quantize the latent vector ``z`` and pack it with the gain field."""
    z = np.asarray(z, dtype=np.float64).ravel()
    payload = pack(cell_index(z, cfg), cfg.n_bits)
    return FronthaulMessage(bs_id, snapshot_id, cfg.n_bits, z.size,
                            float(np.float32(gain)), payload)


def decode_message(msg: FronthaulMessage | bytes, cfg: QuantizerConfig):
    """Return ``(z_hat, gain_hat)``: dequantized latent and decoded gain."""
    if isinstance(msg, (bytes, bytearray)):
        msg = FronthaulMessage.from_bytes(msg)
    if msg.n_bits != cfg.n_bits:
        raise MessageFormatError(f"message carries Q={msg.n_bits}, decoder "
                                 f"configured for Q={cfg.n_bits}")
    idx = unpack(msg.payload, msg.length, msg.n_bits)
    return index_level(idx, cfg), float(msg.gain)


def payload_ratio(length: int, n_bits: int, n_slots: int, n_antennas: int,
                  n_subcarriers: int, gain_bits: int = GAIN_BITS,
                  include_gain: bool = False) -> float:
    """Embedded bits over complex64 CSI bits for one BS and one snapshot."""
    csi_bits = 64 * n_slots * n_antennas * n_subcarriers
    bits = length * n_bits + (gain_bits if include_gain else 0)
    return bits / csi_bits
