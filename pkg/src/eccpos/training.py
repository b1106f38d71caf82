"""Two-stage training: per-BS self-supervised autoencoders, then end-to-end positioning.

All samples are generated on the fly from the simulator. RNG streams are keyed
by (purpose, epoch, sample index) so any run is reproducible from its config.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ParamSet
from .channel import Environment, build_environment, generate_snapshot, pilot_symbols, rng_for
from .config import RunConfig
from .encoder import encode, init_autoencoder, reconstruction_loss, stage1_train
from .estimation import CovarianceBank, build_covariance_bank, estimate_snapshot
from .fronthaul import (FronthaulMessage, QuantizerConfig, calibrate_step, decode_message,
                        encode_message, quantize)
from .fusion import CuModel, cu_forward, init_cu, wmse_loss
from .preprocess import preprocess

log = logging.getLogger(__name__)

# RNG stream ids
STAGE1, STAGE2, VALID1, VALID2, CALIB, TEST, TRAJ = 1, 2, 3, 4, 5, 6, 7
_INIT = 0x1A17


def stream_id(purpose: int, epoch: int = 0) -> int:
    return (purpose << 20) | epoch


@dataclass
class Samples:
    positions: np.ndarray      # (N, 3)
    inputs: np.ndarray         # (N, L, T*N_r, N_sc, 2)
    gains: np.ndarray          # (N, L)

    def __len__(self):
        return len(self.positions)

    def batches(self, size: int):
        for lo in range(0, len(self), size):
            yield Samples(self.positions[lo:lo + size], self.inputs[lo:lo + size],
                          self.gains[lo:lo + size])


def prepare_inputs(run: RunConfig, observations: np.ndarray, bank: CovarianceBank):
    """LMMSE-estimate and preprocess observations (N, L, T, N_r, N_sc)."""
    sc, pp = run.scenario, run.preprocess
    pilots = pilot_symbols(sc)
    n, L = observations.shape[:2]
    X = np.empty((n, L, sc.n_slots * sc.n_antennas, sc.n_subcarriers, 2))
    g = np.empty((n, L))
    for i in range(n):
        H_hat = estimate_snapshot(observations[i], pilots, bank, sc.noise_var)
        for l in range(L):
            pre = preprocess(H_hat[l], pp.eps, pp.eps_angle)
            X[i, l] = pre.inputs
            g[i, l] = pre.gain
    return X, g


def simulate_observations(run: RunConfig, stream: int, count: int,
                          env: Environment | None = None, positions=None):
    env = env or build_environment(run.scenario)
    snaps = [generate_snapshot(run.scenario, stream, i, env,
                               None if positions is None else positions[i])
             for i in range(count)]
    return (np.array([s.position for s in snaps]),
            np.stack([s.observation for s in snaps]))


def generate_samples(run: RunConfig, bank: CovarianceBank, stream: int, count: int,
                     env: Environment | None = None, positions=None) -> Samples:
    p, Y = simulate_observations(run, stream, count, env, positions)
    X, g = prepare_inputs(run, Y, bank)
    return Samples(p, X, g)


def covariance_bank(run: RunConfig, env: Environment | None = None) -> CovarianceBank:
    return build_covariance_bank(run.scenario, run.estimation.calibration_count, env,
                                 run.estimation.loading_factor)


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

def bs_prefix(l: int) -> str:
    return f"bs{l}/"


@dataclass
class EccModel:
    """Per-BS encoders, CU network, and the fronthaul quantizer setting.

    ``n_bits = None`` is the unquantized (lossless embedding) variant.
    """

    encoders: ParamSet
    cu: CuModel
    n_bits: int | None = None
    steps: list[float] = field(default_factory=list)

    @property
    def n_bs(self) -> int:
        return len({n.split("/")[0] for n in self.encoders})

    def quantizers(self) -> list[QuantizerConfig]:
        return [QuantizerConfig(self.n_bits, s) for s in self.steps]

    def latents(self, X: np.ndarray):
        """Unquantized latent tensors per BS, each (B, D)."""
        out = []
        for l in range(X.shape[1]):
            Z = encode(X[:, l], self.encoders, bs_prefix(l))
            out.append(ad.reshape(Z, (Z.shape[0], 1, Z.shape[1] * Z.shape[2])))
        return out

    def forward(self, X: np.ndarray, gains: np.ndarray):
        """Intermediate estimates (B, N_sc, 3) with STE quantization in the graph."""
        zs = self.latents(X)
        if self.n_bits is not None:
            zs = [ad.ste_quantize(z, self.n_bits, s) for z, s in zip(zs, self.steps)]
        return cu_forward(ad.concat(zs, axis=1), gains, self.cu)

    def predict(self, X: np.ndarray, gains: np.ndarray) -> np.ndarray:
        return self.forward(X, gains).data[:, -1, :]

    def messages(self, X: np.ndarray, gains: np.ndarray, first_id: int = 0):
        """Fronthaul messages per snapshot (list of L messages each)."""
        if self.n_bits is None:
            raise ValueError("the unquantized model has no fronthaul bitstream")
        Z = np.concatenate([z.data for z in self.latents(X)], axis=1)
        qs = self.quantizers()
        return [[encode_message(Z[i, l], gains[i, l], qs[l], l, first_id + i)
                 for l in range(Z.shape[1])] for i in range(Z.shape[0])]

    def infer_messages(self, messages: list[list[FronthaulMessage]]) -> np.ndarray:
        """Batched CU inference from received messages; final estimates (N, 3)."""
        qs = self.quantizers()
        z = np.empty((len(messages), len(qs), messages[0][0].length))
        g = np.empty((len(messages), len(qs)))
        for i, msgs in enumerate(messages):
            if len(msgs) != len(qs):
                raise ValueError(f"snapshot {i}: {len(msgs)} messages for {len(qs)} BSs")
            for m in msgs:
                z[i, m.bs_id], g[i, m.bs_id] = decode_message(m, qs[m.bs_id])
        return cu_forward(z, g, self.cu).data[:, -1, :]

    def all_params(self) -> ParamSet:
        return self.encoders.merge(self.cu.params)

    def state(self) -> dict[str, np.ndarray]:
        return self.all_params().values()


def init_encoders(run: RunConfig, seed_key: int = 0) -> list[ParamSet]:
    """Independently initialized autoencoders, one per BS."""
    sc = run.scenario
    return [init_autoencoder(rng_for(run.seed, _INIT, seed_key, l),
                             sc.n_slots * sc.n_antennas, run.encoder, bs_prefix(l))
            for l in range(sc.n_bs)]


def encoders_only(autoencoders: list[ParamSet]) -> ParamSet:
    vals = {}
    for ps in autoencoders:
        vals.update({n: v for n, v in ps.values().items() if "/enc/" in n})
    return ParamSet(vals)


def init_cu_model(run: RunConfig) -> CuModel:
    sc = run.scenario
    return init_cu(rng_for(run.seed, _INIT, 0xC0), sc.n_subcarriers,
                   sc.n_subcarriers * run.encoder.latent_dim, run.fusion,
                   sc.region_low, sc.region_high, sc.n_bs)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def localization_errors(true: np.ndarray, est: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(true) - np.asarray(est), axis=-1)


def nearest_rank(errors, q: float = 90.0) -> float:
    e = np.sort(np.asarray(errors, float))
    if e.size == 0:
        raise ValueError("no errors to summarize")
    rank = int(np.ceil(q / 100.0 * e.size))
    return float(e[max(rank, 1) - 1])


class MetricsLog:
    """CSV training curve: epoch, loss, mean_error_m, e90_m."""

    header = ("epoch", "loss", "mean_error_m", "e90_m")

    def __init__(self, path=None):
        self.rows: list[tuple] = []
        self.path = path
        if path:
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.header)

    def add(self, epoch: int, loss: float, mean_err=None, e90=None):
        row = (epoch, f"{loss:.10g}", "" if mean_err is None else f"{mean_err:.10g}",
               "" if e90 is None else f"{e90:.10g}")
        self.rows.append((epoch, loss, mean_err, e90))
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(row)


def _checkpoint(out_dir, name: str, values: dict[str, np.ndarray]):
    if out_dir:
        ad.save_params(os.path.join(out_dir, name), values)


# ---------------------------------------------------------------------------
# stage I
# ---------------------------------------------------------------------------

@dataclass
class Stage1Result:
    encoders: ParamSet
    history: MetricsLog
    autoencoders: list[ParamSet]


def run_stage1(run: RunConfig, bank: CovarianceBank, env: Environment | None = None,
               out_dir=None) -> Stage1Result:
    """Self-supervised local training of every BS autoencoder.

    Each BS has its own parameters and optimizer state and sees only its own
    CSI; position labels are never read. Decoders are dropped at the end.
    """
    tc = run.train
    env = env or build_environment(run.scenario)
    autoencoders = init_encoders(run)
    opts = [Adam(tc.lr) for _ in autoencoders]
    history = MetricsLog(os.path.join(out_dir, "metrics.csv") if out_dir else None)
    for epoch in range(1, tc.stage1_epochs + 1):
        data = generate_samples(run, bank, stream_id(STAGE1, epoch), tc.samples_per_epoch, env)
        train_losses = []
        for l, (ps, opt) in enumerate(zip(autoencoders, opts)):
            batches = (b.inputs[:, l] for b in data.batches(tc.batch_size))
            train_losses += stage1_train(batches, ps, opt, bs_prefix(l),
                                         step_offset=(epoch - 1) * tc.samples_per_epoch)
        if epoch % tc.validation_period == 0 or epoch == tc.stage1_epochs:
            val = generate_samples(run, bank, stream_id(VALID1, epoch), tc.validation_samples, env)
            loss = float(np.mean([reconstruction_loss(val.inputs[:, l], ps, bs_prefix(l))
                                  for l, ps in enumerate(autoencoders)]))
            history.add(epoch, loss)
            log.info("stage1 epoch %d: train %.4f val %.4f", epoch, np.mean(train_losses), loss)
            merged = autoencoders[0]
            for ps in autoencoders[1:]:
                merged = merged.merge(ps)
            _checkpoint(out_dir, f"checkpoint_e{epoch:04d}.eccparam", merged.values())
    encoders = encoders_only(autoencoders)
    _checkpoint(out_dir, "encoders.eccparam", encoders.values())
    return Stage1Result(encoders, history, autoencoders)


# ---------------------------------------------------------------------------
# quantizer calibration
# ---------------------------------------------------------------------------

def calibrate_quantizer(encoders: ParamSet, samples: Samples, n_bits: int,
                        percentile: float) -> list[float]:
    """Per-BS step sizes from the latent coefficients of ``samples``."""
    steps = []
    for l in range(samples.inputs.shape[1]):
        z = encode(samples.inputs[:, l], encoders, bs_prefix(l)).data
        steps.append(calibrate_step(z, n_bits, percentile))
    return steps


def calibration_samples(run: RunConfig, bank: CovarianceBank,
                        env: Environment | None = None) -> Samples:
    return generate_samples(run, bank, stream_id(CALIB), run.quant.calibration_samples, env)


# ---------------------------------------------------------------------------
# stage II
# ---------------------------------------------------------------------------

@dataclass
class Stage2Result:
    model: EccModel
    history: MetricsLog


def evaluate_model(model: EccModel, samples: Samples, batch: int = 256) -> np.ndarray:
    est = np.concatenate([model.predict(b.inputs, b.gains) for b in samples.batches(batch)])
    return localization_errors(samples.positions, est)


def build_model(run: RunConfig, encoders: ParamSet | None, n_bits: int | None,
                steps: list[float] | None, bank: CovarianceBank | None = None,
                env: Environment | None = None) -> EccModel:
    """Assemble a Stage II starting point (fresh CU, copied or random encoders)."""
    if encoders is None:
        encoders = encoders_only(init_encoders(run, seed_key=0x5C))
    else:
        encoders = ParamSet(encoders.values())
    model = EccModel(encoders, init_cu_model(run), n_bits, list(steps or []))
    if n_bits is not None and not steps:
        if bank is None:
            raise ValueError("quantizer steps or a covariance bank for calibration required")
        model.steps = calibrate_quantizer(encoders, calibration_samples(run, bank, env),
                                          n_bits, run.quant.percentile)
    return model


def run_stage2(run: RunConfig, bank: CovarianceBank, model: EccModel,
               env: Environment | None = None, out_dir=None,
               freeze_encoders: bool | None = None) -> Stage2Result:
    """End-to-end positioning training with the quantizer in the loop.

    Gradients reach the encoders through the straight-through quantizer unless
    ``freeze_encoders`` is set, in which case only the CU network is updated.
    """
    tc = run.train
    env = env or build_environment(run.scenario)
    freeze = tc.freeze_encoders if freeze_encoders is None else freeze_encoders
    params = model.cu.params if freeze else model.all_params()
    opt = Adam(tc.lr)
    history = MetricsLog(os.path.join(out_dir, "metrics.csv") if out_dir else None)
    for epoch in range(1, tc.stage2_epochs + 1):
        data = generate_samples(run, bank, stream_id(STAGE2, epoch), tc.samples_per_epoch, env)
        for step, b in enumerate(data.batches(tc.batch_size)):
            (loss,), grads = ad.forward_backward(
                lambda: wmse_loss(b.positions, model.forward(b.inputs, b.gains)), (), params)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"stage II loss diverged at epoch {epoch}, "
                                         f"batch {step}")
            opt.step(params, grads)
        if epoch % tc.validation_period == 0 or epoch == tc.stage2_epochs:
            val = generate_samples(run, bank, stream_id(VALID2, epoch), tc.validation_samples, env)
            est = model.forward(val.inputs, val.gains)
            vloss = float(wmse_loss(val.positions, est).data)
            err = localization_errors(val.positions, est.data[:, -1, :])
            history.add(epoch, vloss, float(err.mean()), nearest_rank(err))
            log.info("stage2 epoch %d: val loss %.3f mean %.3f m", epoch, vloss, err.mean())
            _checkpoint(out_dir, f"checkpoint_e{epoch:04d}.eccparam", model.state())
    return Stage2Result(model, history)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_model(model: EccModel, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    ad.save_params(os.path.join(out_dir, "model.eccparam"), model.state())
    with open(os.path.join(out_dir, "quantizer.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("bs", "n_bits", "step"))
        for l in range(model.n_bs):
            w.writerow((l, "none" if model.n_bits is None else model.n_bits,
                        "" if model.n_bits is None else repr(model.steps[l])))


def load_model(run: RunConfig, out_dir) -> EccModel:
    values = ad.load_params(os.path.join(out_dir, "model.eccparam"))
    cu = init_cu_model(run)
    cu.params.load_values({k: v for k, v in values.items() if k.startswith("cu/")})
    enc = ParamSet({k: v for k, v in values.items() if not k.startswith("cu/")})
    n_bits, steps = None, []
    with open(os.path.join(out_dir, "quantizer.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            if row["n_bits"] != "none":
                n_bits = int(row["n_bits"])
                steps.append(float(row["step"]))
    return EccModel(enc, cu, n_bits, steps)
