"""Edge-side CSI conditioning.

Gain extraction, normalization, reference-antenna phase stabilization, and
the real-valued stacking/reshape operators that build the encoder input.
CSI tensors are indexed ``(t, m, n)``: slot, antenna, subcarrier. Antenna
indices are zero-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_NORM = 1e-8
EPS_ANGLE = 1e-6


@dataclass
class PreprocessedCsi:
    stabilized: np.ndarray     # (T, N_r, N_sc) complex
    gain: float
    ref_antenna: int
    inputs: np.ndarray         # (T*N_r, N_sc, 2) real


def gain_indicator(H: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.abs(H) ** 2)))


def normalize(H: np.ndarray, gain: float, eps: float = EPS_NORM) -> np.ndarray:
    return H / (gain + eps)


def select_ref_antenna(H: np.ndarray) -> int:
    """Antenna with the largest mean power; ``argmax`` keeps the first on ties."""
    power = np.mean(np.abs(H) ** 2, axis=(0, 2))
    return int(np.argmax(power))


def reference_phase(H: np.ndarray, ref: int, eps_angle: float = EPS_ANGLE) -> np.ndarray:
    r = H[:, ref, :]
    phi = np.where(np.abs(r) >= eps_angle, np.angle(r), 0.0)
    # principal value in (-pi, pi]
    return np.where(phi == -np.pi, np.pi, phi)


def phase_stabilize(H: np.ndarray, ref: int, eps_angle: float = EPS_ANGLE) -> np.ndarray:
    phi = reference_phase(H, ref, eps_angle)
    return H * np.exp(-1j * phi)[:, None, :]


def stack_complex(A: np.ndarray) -> np.ndarray:
    return np.stack([A.real, A.imag], axis=-1)


def unstack_complex(B: np.ndarray) -> np.ndarray:
    return B[..., 0] + 1j * B[..., 1]


def reshape_flatten(B: np.ndarray) -> np.ndarray:
    """(T, N_r, N_sc, 2) -> (T*N_r, N_sc, 2); row ``t * N_r + m``."""
    T, nr = B.shape[:2]
    return B.reshape((T * nr,) + B.shape[2:])


def reshape_unflatten(X: np.ndarray, n_slots: int) -> np.ndarray:
    return X.reshape((n_slots, X.shape[0] // n_slots) + X.shape[1:])


def recover_csi(X: np.ndarray, n_slots: int) -> np.ndarray:
    """Inverse of the full input chain: complex (T, N_r, N_sc) from X."""
    return unstack_complex(reshape_unflatten(X, n_slots))


def preprocess(H_hat: np.ndarray, eps: float = EPS_NORM,
               eps_angle: float = EPS_ANGLE) -> PreprocessedCsi:
    g = gain_indicator(H_hat)
    H_bar = normalize(H_hat, g, eps)
    ref = select_ref_antenna(H_bar)
    H_tilde = phase_stabilize(H_bar, ref, eps_angle)
    return PreprocessedCsi(H_tilde, g, ref, reshape_flatten(stack_complex(H_tilde)))
