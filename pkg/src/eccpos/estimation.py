"""Per-subcarrier LMMSE channel estimation with a calibrated covariance prior."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .channel import Environment, ScenarioConfig, clean_channel_samples

COV_MAGIC = b"ECCCOV1"
_COV_HEADER = struct.Struct("<7sIIII")
COV_STREAM = 0xC0


class SingularSystemError(np.linalg.LinAlgError):
    def __init__(self, subcarrier=None):
        where = "" if subcarrier is None else f" on subcarrier {subcarrier}"
        super().__init__(f"LMMSE system matrix is singular{where}")
        self.subcarrier = subcarrier


def estimate_covariance(realizations, loading: float = 0.0) -> np.ndarray:
    """Sample second moment ``mean(h h^H) + loading * I``."""
    h = np.asarray(realizations, dtype=complex)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValueError("need at least one realization, shaped (N, N_r)")
    R = h.T @ h.conj() / h.shape[0]
    R = 0.5 * (R + R.conj().T)
    return R + loading * np.eye(h.shape[1])


def relative_loading(R: np.ndarray, factor: float = 1e-6) -> float:
    return factor * float(np.real(np.trace(R))) / R.shape[0]


def lmmse_estimate(y, pilot: complex, R: np.ndarray, noise_var: float,
                   subcarrier=None) -> np.ndarray:
    """``R x* (|x|^2 R + noise_var I)^{-1} y`` via a Cholesky solve.

    ``y`` may be a vector (N_r,) or a matrix (N_r, T) of stacked slots.
    """
    R = np.asarray(R, dtype=complex)
    A = abs(pilot) ** 2 * R + noise_var * np.eye(R.shape[0])
    try:
        factor = linalg.cho_factor(A, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise SingularSystemError(subcarrier) from None
    s = linalg.cho_solve(factor, np.conj(pilot) * np.asarray(y, dtype=complex),
                         check_finite=False)
    return R @ s


def mmse_trace(R: np.ndarray, noise_var: float) -> float:
    """Closed-form LMMSE error ``tr(R - R (R + noise_var I)^{-1} R)`` for unit pilots."""
    A = R + noise_var * np.eye(R.shape[0])
    return float(np.real(np.trace(R - R @ np.linalg.solve(A, R))))


@dataclass
class CovarianceBank:
    matrices: np.ndarray                   # (L, N_sc, N_r, N_r)
    count: int
    loading: np.ndarray                    # (L, N_sc)

    @property
    def shape(self):
        return self.matrices.shape[:2]

    def estimate(self, Y: np.ndarray, pilots, noise_var: float, bs: int) -> np.ndarray:
        """LMMSE estimate of one BS tensor Y (T, N_r, N_sc), per subcarrier."""
        out = np.empty_like(Y, dtype=complex)
        for n in range(Y.shape[2]):
            out[:, :, n] = lmmse_estimate(Y[:, :, n].T, pilots[n], self.matrices[bs, n],
                                          noise_var, subcarrier=n).T
        return out

    def save(self, path):
        L, nsc, nr, _ = self.matrices.shape
        inter = np.empty(self.matrices.shape + (2,), dtype="<f8")
        inter[..., 0] = self.matrices.real
        inter[..., 1] = self.matrices.imag
        with open(path, "wb") as fh:
            fh.write(_COV_HEADER.pack(COV_MAGIC, L, nsc, nr, self.count))
            fh.write(np.ascontiguousarray(self.loading, dtype="<f8").tobytes())
            fh.write(inter.tobytes())

    @classmethod
    def load(cls, path) -> "CovarianceBank":
        with open(path, "rb") as fh:
            buf = fh.read()
        magic, L, nsc, nr, count = _COV_HEADER.unpack_from(buf)
        if magic != COV_MAGIC:
            raise ValueError(f"{path}: not an ECCCOV1 file")
        pos = _COV_HEADER.size
        loading = np.frombuffer(buf, "<f8", L * nsc, pos).reshape(L, nsc).copy()
        pos += 8 * L * nsc
        inter = np.frombuffer(buf, "<f8", L * nsc * nr * nr * 2, pos)
        inter = inter.reshape(L, nsc, nr, nr, 2)
        return cls(inter[..., 0] + 1j * inter[..., 1], count, loading)


def build_covariance_bank(config: ScenarioConfig, count: int = 2000,
                          env: Environment | None = None,
                          loading_factor: float = 1e-6) -> CovarianceBank:
    """Average ``count`` clean channel realizations per (BS, subcarrier)."""
    h = clean_channel_samples(config, count, COV_STREAM, env)     # (N, L, N_sc, N_r)
    L, nsc, nr = config.n_bs, config.n_subcarriers, config.n_antennas
    mats = np.empty((L, nsc, nr, nr), complex)
    loads = np.empty((L, nsc))
    for l in range(L):
        for n in range(nsc):
            R0 = estimate_covariance(h[:, l, n])
            loads[l, n] = relative_loading(R0, loading_factor)
            mats[l, n] = R0 + loads[l, n] * np.eye(nr)
    return CovarianceBank(mats, count, loads)


def estimate_snapshot(Y: np.ndarray, pilots, bank: CovarianceBank,
                      noise_var: float) -> np.ndarray:
    """LMMSE estimates for every BS of a snapshot, Y shaped (L, T, N_r, N_sc)."""
    return np.stack([bank.estimate(Y[l], pilots, noise_var, l) for l in range(Y.shape[0])])
