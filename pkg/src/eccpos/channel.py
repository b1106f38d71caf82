"""Geometric multipath channel generator and pilot observation model.

The ray tracer of a full urban study is replaced by a single-bounce model:
each BS-UE link carries an optional direct path plus reflections off a fixed
field of point scatterers. Path delays and arrival angles follow from the
geometry, so the frequency-domain structure of the channel (per-path phase
progression across subcarriers, inter-antenna phase from the array response)
is exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer keys into ``seed``; used for per-sample RNG streams."""
    s = splitmix64(seed & _MASK64)
    for k in keys:
        s = splitmix64(s ^ (k & _MASK64))
    return s


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *keys)))


@dataclass(frozen=True)
class ScenarioConfig:
    n_bs: int = 3
    n_slots: int = 2
    array_rows: int = 1
    array_cols: int = 2
    n_subcarriers: int = 8
    subcarrier_spacing: float = 720e3      # effective spacing of retained subcarriers
    first_subcarrier: float = 3.5e9
    carrier_frequency: float = 3.5e9
    antenna_spacing: float = 0.5           # in carrier wavelengths
    region_x: tuple[float, float] = (0.0, 60.0)
    region_y: tuple[float, float] = (0.0, 60.0)
    height: tuple[float, float] = (0.0, 10.0)
    noise_var: float = 1e-3
    paths_min: int = 2
    paths_max: int = 5
    blockage_prob: float = 0.5
    blocked_gain: float = 1e-3             # residual amplitude factor of a blocked direct path
    reference_distance: float = 10.0       # distance of unit path amplitude
    reflection_loss: float = 0.5
    n_scatterers: int = 24
    bs_height: float = 15.0
    bs_radius: float = 0.8                 # BS ring radius, fraction of the region half-diagonal
    seed: int = 0

    def __post_init__(self):
        if min(self.n_bs, self.n_slots, self.array_rows, self.array_cols,
               self.n_subcarriers) < 1:
            raise ValueError("L, T, array rows/cols and N_sc must all be >= 1")
        if self.noise_var < 0:
            raise ValueError("noise variance must be nonnegative")
        for lo, hi in (self.region_x, self.region_y, self.height):
            if hi < lo:
                raise ValueError("empty region bounds")
        if not 1 <= self.paths_min <= self.paths_max:
            raise ValueError("need 1 <= paths_min <= paths_max")

    @property
    def n_antennas(self) -> int:
        return self.array_rows * self.array_cols

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency

    @property
    def frequencies(self) -> np.ndarray:
        return self.first_subcarrier + np.arange(self.n_subcarriers) * self.subcarrier_spacing

    @property
    def region_low(self) -> np.ndarray:
        return np.array([self.region_x[0], self.region_y[0], self.height[0]])

    @property
    def region_high(self) -> np.ndarray:
        return np.array([self.region_x[1], self.region_y[1], self.height[1]])

    def in_region(self, p, tol: float = 1e-9) -> bool:
        p = np.asarray(p)
        return bool(np.all(p >= self.region_low - tol) and np.all(p <= self.region_high + tol))


@dataclass(frozen=True)
class ArrayGeometry:
    rows: int
    cols: int
    spacing: float                         # metres
    azimuth: float = 0.0                   # boresight azimuth (rad)
    tilt: float = 0.0                      # boresight elevation (rad)

    @property
    def n_elements(self) -> int:
        return self.rows * self.cols

    def element_offsets(self) -> np.ndarray:
        """Element displacements from element 0, row-major over (row, col)."""
        ca, sa = np.cos(self.azimuth), np.sin(self.azimuth)
        ct, st = np.cos(self.tilt), np.sin(self.tilt)
        horizontal = np.array([-sa, ca, 0.0])
        vertical = np.array([-ca * st, -sa * st, ct])
        r, c = np.divmod(np.arange(self.n_elements), self.cols)
        return self.spacing * (c[:, None] * horizontal + r[:, None] * vertical)


@dataclass(frozen=True)
class BsSite:
    position: np.ndarray
    geometry: ArrayGeometry


@dataclass(frozen=True)
class PathComponent:
    gain: complex
    azimuth: float
    elevation: float
    delay: float


@dataclass
class PathSet:
    """Propagation paths of one link, stored column-wise."""

    gain: np.ndarray
    azimuth: np.ndarray
    elevation: np.ndarray
    delay: np.ndarray

    def __len__(self):
        return len(self.delay)

    def __iter__(self):
        for k in range(len(self)):
            yield PathComponent(complex(self.gain[k]), float(self.azimuth[k]),
                                float(self.elevation[k]), float(self.delay[k]))

    @classmethod
    def from_components(cls, comps) -> "PathSet":
        comps = list(comps)
        return cls(np.array([c.gain for c in comps], dtype=complex),
                   np.array([c.azimuth for c in comps], dtype=float),
                   np.array([c.elevation for c in comps], dtype=float),
                   np.array([c.delay for c in comps], dtype=float))


@dataclass(frozen=True)
class Environment:
    """Static part of a scenario: BS sites and the scatterer field."""

    sites: tuple[BsSite, ...]
    scatterers: np.ndarray                 # (S, 3)
    scatterer_phase: np.ndarray            # (S,)


@dataclass
class Snapshot:
    position: np.ndarray                   # (3,)
    paths: list[PathSet]
    channel: np.ndarray                    # (L, T, N_r, N_sc) complex
    observation: np.ndarray                # (L, T, N_r, N_sc) complex


def default_sites(config: ScenarioConfig) -> tuple[BsSite, ...]:
    """BSs on a ring around the region centre, boresight towards the centre."""
    lo, hi = config.region_low, config.region_high
    centre = 0.5 * (lo + hi)
    half_diag = 0.5 * np.hypot(hi[0] - lo[0], hi[1] - lo[1])
    radius = config.bs_radius * half_diag
    sites = []
    for l in range(config.n_bs):
        ang = np.pi / 4 + 2 * np.pi * l / config.n_bs
        pos = np.array([centre[0] + radius * np.cos(ang),
                        centre[1] + radius * np.sin(ang), config.bs_height])
        geom = ArrayGeometry(config.array_rows, config.array_cols,
                             config.antenna_spacing * config.wavelength,
                             azimuth=float(ang + np.pi), tilt=0.0)
        sites.append(BsSite(pos, geom))
    return tuple(sites)


@lru_cache(maxsize=32)
def build_environment(config: ScenarioConfig) -> Environment:
    rng = rng_for(config.seed, 0xE1)
    lo, hi = config.region_low, config.region_high
    scat = lo + (hi - lo) * rng.random((config.n_scatterers, 3))
    phase = rng.uniform(-np.pi, np.pi, config.n_scatterers)
    return Environment(default_sites(config), scat, phase)


def sample_ue_position(config: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi = config.region_low, config.region_high
    return lo + (hi - lo) * rng.random(3)


def _direction(frm: np.ndarray, to: np.ndarray):
    d = to - frm
    az = np.arctan2(d[..., 1], d[..., 0])
    el = np.arctan2(d[..., 2], np.hypot(d[..., 0], d[..., 1]))
    return az, el


def synth_paths(config: ScenarioConfig, p, site: BsSite, rng: np.random.Generator,
                env: Environment | None = None) -> PathSet:
    """Paths of one UE-BS link.

    Path 0 is the direct path (amplitude scaled by ``blocked_gain`` when the
    link is blocked). The remaining ``K - 1`` paths bounce off the scatterers
    of ``env`` with the shortest total length; their amplitude decays with
    that length and their phase is a fixed property of the scatterer.
    """
    env = env or build_environment(config)
    p = np.asarray(p, dtype=float)
    s = site.position
    n_paths = int(rng.integers(config.paths_min, config.paths_max + 1))
    blocked = rng.random() < config.blockage_prob

    d0 = float(np.linalg.norm(p - s))
    amp0 = config.reference_distance / max(d0, 1e-3)
    if blocked:
        amp0 *= config.blocked_gain
    az0, el0 = _direction(s, p)

    gains = [complex(amp0)]
    az, el, delay = [float(az0)], [float(el0)], [d0 / SPEED_OF_LIGHT]
    n_scatter = min(n_paths - 1, len(env.scatterers))
    if n_scatter > 0:
        q = env.scatterers
        length = np.linalg.norm(q - p, axis=1) + np.linalg.norm(q - s, axis=1)
        chosen = np.argsort(length, kind="stable")[:n_scatter]
        qa, qe = _direction(s, q[chosen])
        amp = config.reflection_loss * config.reference_distance / length[chosen]
        gains += list(amp * np.exp(1j * env.scatterer_phase[chosen]))
        az += list(qa)
        el += list(qe)
        delay += list(length[chosen] / SPEED_OF_LIGHT)
    return PathSet(np.array(gains, dtype=complex), np.array(az), np.array(el),
                   np.array(delay))


def unit_direction(azimuth, elevation) -> np.ndarray:
    azimuth, elevation = np.asarray(azimuth), np.asarray(elevation)
    ce = np.cos(elevation)
    return np.stack([ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation)], axis=-1)


def array_response(azimuth, elevation, geometry: ArrayGeometry,
                   wavelength: float) -> np.ndarray:
    """Unit-modulus steering vector(s); element 0 is the phase reference."""
    u = unit_direction(azimuth, elevation)
    proj = u @ geometry.element_offsets().T
    return np.exp(1j * 2 * np.pi / wavelength * proj)


def channel_freq_response(paths: PathSet, freqs, geometry: ArrayGeometry,
                          wavelength: float) -> np.ndarray:
    """Sum of path contributions at each frequency; shape ``freqs.shape + (N_r,)``."""
    freqs = np.asarray(freqs, dtype=float)
    steer = array_response(paths.azimuth, paths.elevation, geometry, wavelength)  # (K, N_r)
    phasor = np.exp(-2j * np.pi * freqs[..., None] * paths.delay)                  # (..., K)
    return (phasor * paths.gain) @ steer


def link_channel(config: ScenarioConfig, paths: PathSet, site: BsSite) -> np.ndarray:
    """Clean channel tensor (T, N_r, N_sc); path parameters are slot-invariant."""
    h = channel_freq_response(paths, config.frequencies, site.geometry, config.wavelength)
    return np.broadcast_to(h.T, (config.n_slots,) + h.T.shape).copy()


def pilot_symbols(config: ScenarioConfig) -> np.ndarray:
    return np.ones(config.n_subcarriers, dtype=complex)


def observe_pilots(H: np.ndarray, pilots, noise_var: float,
                   rng: np.random.Generator) -> np.ndarray:
    """``y[..., n] = x_n h[..., n] + CN(0, noise_var)`` noise."""
    pilots = np.asarray(pilots)
    if np.any(np.abs(pilots) == 0):
        raise ValueError("pilot symbols must be nonzero")
    noise = rng.standard_normal(H.shape) + 1j * rng.standard_normal(H.shape)
    return pilots * H + np.sqrt(noise_var / 2.0) * noise


def generate_snapshot(config: ScenarioConfig, stream: int, index: int,
                      env: Environment | None = None,
                      position=None) -> Snapshot:
    """Snapshot ``index`` of RNG stream ``stream``; fully determined by its keys."""
    env = env or build_environment(config)
    rng = rng_for(config.seed, stream, index)
    p = sample_ue_position(config, rng) if position is None else np.asarray(position, float)
    pilots = pilot_symbols(config)
    paths, chans, obs = [], [], []
    for site in env.sites:
        ps = synth_paths(config, p, site, rng, env)
        H = link_channel(config, ps, site)
        paths.append(ps)
        chans.append(H)
        obs.append(observe_pilots(H, pilots, config.noise_var, rng))
    return Snapshot(p, paths, np.stack(chans), np.stack(obs))


def clean_channel_samples(config: ScenarioConfig, count: int, stream: int,
                          env: Environment | None = None) -> np.ndarray:
    """``count`` noiseless channels per BS, shape (count, L, N_sc, N_r)."""
    env = env or build_environment(config)
    out = np.empty((count, config.n_bs, config.n_subcarriers, config.n_antennas), complex)
    for i in range(count):
        rng = rng_for(config.seed, stream, i)
        p = sample_ue_position(config, rng)
        for l, site in enumerate(env.sites):
            ps = synth_paths(config, p, site, rng, env)
            out[i, l] = channel_freq_response(ps, config.frequencies, site.geometry,
                                              config.wavelength)
    return out


# ---------------------------------------------------------------------------
# dataset file
# ---------------------------------------------------------------------------

DATA_MAGIC = b"ECCDATA1"
_DATA_HEADER = struct.Struct("<8sIIIIQdQ")


def write_dataset(path, config: ScenarioConfig, positions: np.ndarray,
                  observations: np.ndarray):
    """Positions (N, 3) and observations (N, L, T, N_r, N_sc) to an ECCDATA1 file."""
    positions = np.asarray(positions, dtype="<f8")
    obs = np.asarray(observations)
    n = positions.shape[0]
    expect = (n, config.n_bs, config.n_slots, config.n_antennas, config.n_subcarriers)
    if obs.shape != expect:
        raise ValueError(f"observation tensor shape {obs.shape} != {expect}")
    inter = np.empty(obs.shape + (2,), dtype="<f4")
    inter[..., 0] = obs.real
    inter[..., 1] = obs.imag
    with open(path, "wb") as fh:
        fh.write(_DATA_HEADER.pack(DATA_MAGIC, config.n_bs, config.n_slots,
                                   config.n_antennas, config.n_subcarriers, n,
                                   config.noise_var, config.seed & _MASK64))
        for i in range(n):
            fh.write(positions[i].tobytes())
            fh.write(inter[i].tobytes())


@dataclass
class Dataset:
    n_bs: int
    n_slots: int
    n_antennas: int
    n_subcarriers: int
    noise_var: float
    seed: int
    positions: np.ndarray
    observations: np.ndarray


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _DATA_HEADER.size:
        raise ValueError(f"{path}: truncated dataset header")
    magic, L, T, nr, nsc, n, var, seed = _DATA_HEADER.unpack_from(buf)
    if magic != DATA_MAGIC:
        raise ValueError(f"{path}: not an ECCDATA1 file")
    per = L * T * nr * nsc * 2
    rec = np.dtype([("p", "<f8", (3,)), ("y", "<f4", (per,))])
    if len(buf) - _DATA_HEADER.size != n * rec.itemsize:
        raise ValueError(f"{path}: body size does not match {n} records")
    recs = np.frombuffer(buf, dtype=rec, count=n, offset=_DATA_HEADER.size)
    y = recs["y"].astype(np.float64).reshape(n, L, T, nr, nsc, 2)
    return Dataset(L, T, nr, nsc, var, seed, recs["p"].copy(), y[..., 0] + 1j * y[..., 1])
